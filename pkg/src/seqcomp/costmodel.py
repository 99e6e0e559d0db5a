"""Hardware-independent per-sample training cost and budget accounting.

Costs count encoder token-passes under a linear-complexity assumption
(forward = L, backward = 2L), normalized by one uncompressed forward pass
of L_base tokens. Sequence lengths INCLUDE the class token. EMA updates,
loss evaluation and optimizer steps are costed at zero.

Per-sample cost by algorithm (L_q, L_k total sequence lengths):

* simclr: 3 (L_q + L_k) / L_base            (backward through both encoders)
* moco:   (3 L_q + L_k) / L_base            (key encoder forward only)
* dino:   (3 L_q + 3 K L_q_small + L_k) / L_base   (K extra student crops)
"""

from dataclasses import dataclass, field

L_BASE_DEFAULT = 197.0  # 14x14 grid + class token


def sample_cost(algorithm, l_q, l_k, k_crops=0, l_q_small=0, l_base=L_BASE_DEFAULT):
    """Dimensionless cost of one training sample."""
    if l_q < 1 or l_k < 1:
        raise ValueError("sequence lengths must be >= 1")
    if algorithm == "simclr":
        passes = 3.0 * (l_q + l_k)
    elif algorithm == "moco":
        passes = 3.0 * l_q + l_k
    elif algorithm == "dino":
        passes = 3.0 * l_q + 3.0 * k_crops * l_q_small + l_k
    else:
        raise ValueError(f"unknown algorithm '{algorithm}'")
    return passes / l_base


@dataclass
class BudgetLedger:
    """Monotone spend counter against a fixed training budget."""
    total: float
    spent: float = 0.0
    phases: dict = field(default_factory=dict)

    def has_budget(self):
        return self.spent < self.total

    def remaining(self):
        return self.total - self.spent


def charge(ledger: BudgetLedger, costs, phase="train"):
    """Add per-sample costs (a scalar or an iterable) to the ledger.

    The training loop stops once spent >= total; a single batch may
    overshoot, anything beyond that is an accounting error.
    """
    amount = float(costs) if isinstance(costs, (int, float)) else float(sum(costs))
    if amount < 0:
        raise ValueError("negative cost")
    if ledger.spent >= ledger.total and amount > 0:
        raise RuntimeError(
            f"overdraw: ledger already exhausted ({ledger.spent}/{ledger.total})")
    ledger.spent += amount
    ledger.phases[phase] = ledger.phases.get(phase, 0.0) + amount
    return ledger
