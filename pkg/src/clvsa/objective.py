"""Training loss: forward CE + alpha * backward CE + beta * KLD + gamma * L2."""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .model import ModelOutput

LOG_COLUMNS = ("iteration", "ce_forward", "ce_backward", "kld", "l2", "beta", "total")


@dataclass
class ObjectiveBreakdown:
    ce_forward: float
    ce_backward: float
    kld: float
    l2: float
    beta: float
    total: float

    def as_row(self, iteration: int) -> list:
        return [iteration, *astuple(self)]

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in astuple(self))


@dataclass(frozen=True)
class AnnealSchedule:
    iterations: int = 1000

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("anneal iterations must be >= 1")


def beta_at(k: int, schedule: AnnealSchedule) -> float:
    if k < 0:
        raise ValueError("iteration must be >= 0")
    return min(1.0, k / schedule.iterations)


def kld_diag_gaussian(mu_q: Node, logvar_q: Node, mu_p: Node, logvar_p: Node) -> Node:
    """Closed-form KL(posterior || prior), summed over z and averaged over steps."""
    return dc.gaussian_kl(mu_q, logvar_q, mu_p, logvar_p)


def l2_penalty(params: dict[str, Node]) -> Node:
    return dc.add_n([dc.sum_squares(n) for n in params.values()])


def total_objective(output: ModelOutput, labels: np.ndarray, params: dict[str, Node],
                    k: int, alpha: float = 2.5e-4, gamma: float = 1e-5,
                    schedule: AnnealSchedule = AnnealSchedule()):
    """Returns (loss node, ObjectiveBreakdown).

    ``labels`` are class indices [B, L] in forward time order; the backward
    term uses them reversed to match the backward decoder's emission order.
    """
    labels = np.asarray(labels)
    if labels.shape != output.probs.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match predictions "
                         f"{output.probs.shape[:-1]}")
    beta = beta_at(k, schedule)
    ce_f = dc.cross_entropy(output.probs, labels)
    l2 = l2_penalty(params)
    terms = [ce_f, dc.scale(l2, gamma)]
    ce_b_value = kld_value = 0.0
    if output.bwd_probs is not None:
        ce_b = dc.cross_entropy(output.bwd_probs, labels[:, ::-1])
        kld = kld_diag_gaussian(output.post_mu, output.post_logvar,
                                output.prior_mu, output.prior_logvar)
        terms += [dc.scale(ce_b, alpha), dc.scale(kld, beta)]
        ce_b_value, kld_value = float(ce_b.value), float(kld.value)
    total = dc.add_n(terms)
    breakdown = ObjectiveBreakdown(float(ce_f.value), ce_b_value, kld_value,
                                   float(l2.value), beta, float(total.value))
    return total, breakdown
