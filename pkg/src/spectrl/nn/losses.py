"""PPO loss assembly and action log-density helpers."""

from __future__ import annotations

import numpy as np

from spectrl.nn import tape
from spectrl.nn.tape import Tensor

__all__ = ["categorical_logp", "gaussian_logp", "ppo_losses"]

_LOG_2PI = float(np.log(2.0 * np.pi))


def ppo_losses(old_logp, new_logp: Tensor, advantages, values: Tensor, value_targets,
               clip_eps: float = 0.2, entropy_coef: float = 0.0):
    """Clipped-surrogate policy loss, value MSE, and an entropy estimate.

    Returns (policy_loss, value_loss, entropy).  The entropy term is the
    sample estimate -mean(new_logp) (the exact distribution is not visible
    here); it is scaled by entropy_coef and folded into policy_loss as the
    usual exploration bonus, so entropy_coef=0 gives the bare surrogate.
    """
    old_logp = tape.Tensor(old_logp) if not isinstance(old_logp, Tensor) else old_logp
    adv = advantages.data if isinstance(advantages, Tensor) else np.asarray(advantages)
    ratio = tape.exp(new_logp - old_logp.detach())
    clipped = tape.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surrogate = tape.minimum(ratio * adv, clipped * adv)
    entropy = -tape.mean(new_logp)
    policy_loss = -tape.mean(surrogate) - entropy_coef * entropy
    value_loss = tape.mean(tape.square(values - _data(value_targets)))
    return policy_loss, value_loss, entropy


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def categorical_logp(logits: Tensor, actions) -> Tensor:
    """log pi(a) for integer actions under softmax(logits); shapes (B,K),(B,)->(B,)."""
    return tape.gather_rows(tape.log_softmax(logits, axis=-1), actions)


def gaussian_logp(mean: Tensor, logstd: Tensor, actions) -> Tensor:
    """Diagonal-Gaussian log density, summed over the action axis."""
    a = Tensor(actions) if not isinstance(actions, Tensor) else actions
    z = (a.detach() - mean) * tape.exp(-logstd)
    per_dim = -0.5 * tape.square(z) - logstd - 0.5 * _LOG_2PI
    return tape.tsum(per_dim, axis=-1)
