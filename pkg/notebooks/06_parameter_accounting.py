"""
How many parameters does each strategy train?
==============================================

Counts come from building the model and reading its trainable mask. The
full-size backbone dimensions are used here only for accounting.
"""

from adaptermix.model import PAPER_BAND_STRATEGY, PAPER_CONFIG, AdaptationStrategy, fraction_sweep, parameter_report

for strategy in (
    AdaptationStrategy("finetune"),
    AdaptationStrategy("single_adapter"),
    AdaptationStrategy("adapter_mix", n_adapters=4),
):
    counts = parameter_report(PAPER_CONFIG, strategy)
    print(f"{strategy.kind:>15}: {counts['trainable']:>9} of {counts['total']:>9} "
          f"({100 * counts['fraction']:.2f}%)")

###############################################################################
# The number of adapters per slot sets the mixture's share. With bottlenecks
# 128 (decoder) and 64 (variance) no whole N lands between 11% and 12%:
# one adapter per slot already trains about a tenth of the backbone.

for n, counts in fraction_sweep(PAPER_CONFIG, 128, 64):
    print(f"N={n}: {100 * counts['fraction']:.2f}%")

###############################################################################
# Two adapters with a decoder bottleneck of 72 land at 11.86%.

counts = parameter_report(PAPER_CONFIG, PAPER_BAND_STRATEGY)
print(PAPER_BAND_STRATEGY)
print(f"{100 * counts['fraction']:.2f}%")
