"""Distribution of a trust-fund calculated balance from incomplete annual accounts.

Missing collections, disbursements and balances are multiply imputed under a
multivariate normal model; each completed series then gets a refitted VAR and
a synthetic realization over the questionable years, and the spread of the
resulting totals is summarized.
"""
__version__ = "0.1.0"
