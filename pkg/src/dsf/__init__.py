"""Divergence-based similarity for multi-view contrastive learning.

Views of an instance are summarised by a von Mises-Fisher distribution and
instances are compared by the negative KL divergence between them.
"""

from dsf.bessel import bessel_ratio, bessel_ratio_dkappa, invert_ratio_newton, log_bessel_i
from dsf.losses import (
    LossOutput,
    NegativeQueue,
    NegativeSet,
    dsf_loss,
    fea_avg,
    info_nce,
    loss_avg,
    proposition_table,
    sim_cos,
    sim_div,
    theorem_equivalence_check,
)
from dsf.vmf import (
    DegenerateDirectionError,
    StabilizationPolicy,
    VmfDistribution,
    estimate,
    kl_divergence,
    log_pdf,
    sample,
)

__version__ = "0.1.0"
