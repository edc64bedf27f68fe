"""Committee machine with routed hidden fields and an annealed soft surrogate.

The trainable weights are J[k, i] (hidden unit k, input coordinate i).  The
soft classifier is s = tanh(beta * sum_k tanh(beta * F_k) / sqrt(K)); its
cross-entropy loss is evaluated through the numerically safe identity
-log((1 + y * tanh(u)) / 2) = softplus(-2 * y * u).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .routing import PermutationBank


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def _sign_pm(v: np.ndarray) -> np.ndarray:
    """Sign with the tie sign(0) = +1."""
    return np.where(v >= 0, 1, -1).astype(np.int8)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_hard(j: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Hard committee vote sign(sum_k sign(F_k)) for a batch, labels +-1."""
    fields = x @ j.T
    return _sign_pm(_sign_pm(fields).sum(axis=-1))


def forward_soft(j: np.ndarray, x: np.ndarray, beta: float) -> np.ndarray:
    """Soft committee output in (-1, 1) with sharpness beta."""
    if not beta > 0:
        raise ValueError(f"sharpness must be positive, got {beta}")
    k = j.shape[0]
    u = beta * np.tanh(beta * (x @ j.T)).sum(axis=-1) / math.sqrt(k)
    return np.tanh(u)


def soft_loss(j: np.ndarray, x: np.ndarray, y: np.ndarray, beta: float) -> float:
    """Mean cross-entropy of the soft classifier against +-1 labels."""
    k = j.shape[0]
    u = beta * np.tanh(beta * (x @ j.T)).sum(axis=-1) / math.sqrt(k)
    return float(_softplus(-2.0 * y * u).mean())


def soft_loss_and_grad(j: np.ndarray, x: np.ndarray, y: np.ndarray, beta: float):
    """Mean surrogate loss and its gradient w.r.t. the weights J."""
    k = j.shape[0]
    b = x.shape[0]
    t = np.tanh(beta * (x @ j.T))          # (B, K)
    u = beta * t.sum(axis=-1) / math.sqrt(k)
    z = -2.0 * y * u
    loss = float(_softplus(z).mean())
    dl_du = _sigmoid(z) * (-2.0 * y) / b    # (B,)
    df = dl_du[:, None] * (beta * beta / math.sqrt(k)) * (1.0 - t * t)
    return loss, df.T @ x


@dataclass(frozen=True)
class CommitteeRouting:
    """Quenched channel structure over the K x n synapses.

    ``src[s, a, k, i]`` is the cover supplying synapse (k, i) to channel s
    when the destination cover is a; the channel's own destination synapse
    always routes to the destination cover itself.
    """

    dest_synapses: np.ndarray  # (S, 2) rows (k, i)
    src: np.ndarray            # (S, M, K, n) source-cover gather table
    flat_scatter: np.ndarray   # (S, M, K, n) int64 indices into (M*K*n,) grads

    @property
    def n_channels(self) -> int:
        return self.dest_synapses.shape[0]

    @property
    def m(self) -> int:
        return self.src.shape[1]


def build_committee_routing(k: int, n: int, bank: PermutationBank, n_channels: int,
                            rng: np.random.Generator) -> CommitteeRouting:
    """Sample destination synapses and per-(synapse, channel) bank routes."""
    n_syn = k * n
    if not 1 <= n_channels <= n_syn:
        raise ValueError(f"need 1 <= channels <= {n_syn}, got {n_channels}")
    m = bank.m
    s_perm = bank.size
    perms_ext = np.vstack([bank.perms, np.arange(m, dtype=np.int64)])
    flat_dest = rng.choice(n_syn, size=n_channels, replace=False)
    dest = np.stack([flat_dest // n, flat_dest % n], axis=1)
    route_idx = rng.integers(0, s_perm, size=(n_syn, n_channels))
    route_idx[flat_dest, np.arange(n_channels)] = s_perm  # self-route = identity
    # src[s, a, q] = perms_ext[route_idx[q, s], a]
    src = perms_ext[route_idx.T]              # (S, n_syn, M)
    src = np.ascontiguousarray(src.transpose(0, 2, 1)).reshape(n_channels, m, k, n)
    flat = src * n_syn + np.arange(n_syn).reshape(1, 1, k, n)
    return CommitteeRouting(dest_synapses=dest, src=src,
                            flat_scatter=flat.astype(np.int64))


def routed_hidden_fields(covers: np.ndarray, routing: CommitteeRouting,
                         x: np.ndarray) -> np.ndarray:
    """Hidden fields per (channel, destination cover), shape (S, M, B, K)."""
    s_chan, m, k, n = routing.src.shape
    j_eff = covers.reshape(-1)[routing.flat_scatter]  # (S, M, K, n)
    f = x @ j_eff.reshape(s_chan * m * k, n).T        # (B, S*M*K)
    return np.ascontiguousarray(f.reshape(x.shape[0], s_chan, m, k).transpose(1, 2, 0, 3))


def lifted_loss(covers: np.ndarray, routing: CommitteeRouting, x: np.ndarray,
                y: np.ndarray, beta: float) -> float:
    """Channel-averaged, cover-summed surrogate loss of the routed committee."""
    k = covers.shape[1]
    f = routed_hidden_fields(covers, routing, x)
    u = beta * np.tanh(beta * f).sum(axis=-1) / math.sqrt(k)  # (S, M, B)
    per_slice = _softplus(-2.0 * y * u).mean(axis=-1)
    return float(per_slice.sum() / routing.n_channels)


def lifted_loss_and_grads(covers: np.ndarray, routing: CommitteeRouting,
                          x: np.ndarray, y: np.ndarray, beta: float):
    """Loss plus per-cover gradients; each slice's error lands on its source covers."""
    m, k, n = covers.shape
    if m == 1:
        # single cover: every route is the identity and all channels coincide
        loss, grad = soft_loss_and_grad(covers[0], x, y, beta)
        return loss, grad[None]
    s_chan = routing.n_channels
    b = x.shape[0]
    j_eff = covers.reshape(-1)[routing.flat_scatter]
    f = (x @ j_eff.reshape(s_chan * m * k, n).T).reshape(b, s_chan, m, k)
    t = np.tanh(beta * f)
    u = beta * t.sum(axis=-1) / math.sqrt(k)     # (B, S, M)
    z = -2.0 * y[:, None, None] * u
    loss = float(_softplus(z).mean(axis=0).sum() / s_chan)
    dl_du = _sigmoid(z) * (-2.0 * y[:, None, None]) / (b * s_chan)
    df = dl_du[:, :, :, None] * (beta * beta / math.sqrt(k)) * (1.0 - t * t)
    dj_eff = df.reshape(b, -1).T @ x             # (S*M*K, n)
    grads = np.bincount(routing.flat_scatter.ravel(), weights=dj_eff.ravel(),
                        minlength=m * k * n).reshape(m, k, n)
    return loss, grads


def mcover_sgd_step(covers: np.ndarray, routing: CommitteeRouting, x: np.ndarray,
                    y: np.ndarray, beta: float, lr: float) -> float:
    """One plain-SGD step of every cover on the routed surrogate; returns the loss."""
    loss, grads = lifted_loss_and_grads(covers, routing, x, y, beta)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite lifted loss {loss}")
    covers -= lr * grads
    return loss


def rsgd_step(replicas: np.ndarray, x: np.ndarray, y: np.ndarray, beta: float,
              lr: float, coupling: float) -> float:
    """Independent surrogate steps plus attraction toward the replica mean."""
    m = replicas.shape[0]
    if m < 2:
        raise ValueError(f"replicated SGD needs M >= 2, got {m}")
    mean_w = replicas.mean(axis=0)
    total = 0.0
    updates = np.empty_like(replicas)
    for a in range(m):
        loss, grad = soft_loss_and_grad(replicas[a], x, y, beta)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite replica loss {loss}")
        updates[a] = -lr * grad + lr * coupling * (mean_w - replicas[a])
        total += loss
    replicas += updates
    return total / m


@dataclass
class SurrogateSchedule:
    """Annealed-sharpness training schedule for the soft committee."""

    beta0: float = 1.0
    beta_growth: float = 1.005      # multiplicative, per epoch
    lr0: float = 0.5
    lr_decay: float = 1.0           # multiplicative, per epoch
    max_epochs: int = 500
    loss_stop: float = 1e-7
    batch_size: int = 100
    coupling0: float = 0.5          # rSGD only
    coupling_growth: float = 1.001  # per epoch, capped at coupling_max
    coupling_max: float = 5.0

    def __post_init__(self):
        if self.beta_growth < 1:
            raise ValueError("beta must not shrink during annealing")
        if not self.lr0 > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class CommitteeRunResult:
    test_error: float
    train_error: float
    final_loss: float
    epochs_run: int
    loss_trace: list
    collapsed: np.ndarray


def init_covers(m: int, k: int, n: int, rng: np.random.Generator,
                shared_noise: float | None = None) -> np.ndarray:
    """Gaussian init, entries N(0, 1/n) per cover.

    With ``shared_noise`` set, all covers start from one shared draw plus
    independent relative perturbations of that size, keeping the collapse
    aligned from the first step.
    """
    scale = 1.0 / math.sqrt(n)
    if shared_noise is None:
        return rng.normal(0.0, scale, size=(m, k, n))
    shared = rng.normal(0.0, scale, size=(k, n))
    return shared[None] + shared_noise * scale * rng.normal(0.0, 1.0, size=(m, k, n))


def collapse(covers: np.ndarray, binarize: bool = False) -> np.ndarray:
    """Average the covers; optionally snap to +-1 signs at readout."""
    j = np.atleast_3d(covers).mean(axis=0)
    return _sign_pm(j).astype(np.float64) if binarize else j


def train_committee(method: str, train_x: np.ndarray, train_y: np.ndarray,
                    test_x: np.ndarray, test_y: np.ndarray, k: int, m: int,
                    schedule: SurrogateSchedule, rng: np.random.Generator,
                    routing: CommitteeRouting | None = None,
                    binarize_readout: bool = False,
                    shared_init_noise: float | None = None) -> CommitteeRunResult:
    """Run one committee training trial and score the collapsed machine.

    ``method`` is one of ``sgd`` (single copy), ``rsgd`` (mean-coupled
    replicas), or ``mcover`` (routed channels; requires ``routing``).
    """
    n = train_x.shape[1]
    p = train_x.shape[0]
    if method == "sgd":
        covers = init_covers(1, k, n, rng)
    else:
        covers = init_covers(m, k, n, rng, shared_noise=shared_init_noise)
    if method == "mcover" and m > 1 and routing is None:
        raise ValueError("mcover training needs a routing structure")
    beta = schedule.beta0
    lr = schedule.lr0
    coupling = schedule.coupling0
    bsz = schedule.batch_size
    trace = []
    epochs_run = 0
    for epoch in range(schedule.max_epochs):
        order = rng.permutation(p)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, p, bsz):
            sel = order[start:start + bsz]
            xb, yb = train_x[sel], train_y[sel]
            if method == "sgd":
                loss, grad = soft_loss_and_grad(covers[0], xb, yb, beta)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss {loss}")
                covers[0] -= lr * grad
            elif method == "rsgd":
                loss = rsgd_step(covers, xb, yb, beta, lr, coupling)
            elif method == "mcover":
                if m == 1:
                    loss, grad = soft_loss_and_grad(covers[0], xb, yb, beta)
                    if not math.isfinite(loss):
                        raise DivergenceError(f"non-finite loss {loss}")
                    covers[0] -= lr * grad
                else:
                    loss = mcover_sgd_step(covers, routing, xb, yb, beta, lr)
                    loss = loss / m  # per-cover scale for the stopping rule
            else:
                raise ValueError(f"unknown method {method!r}")
            epoch_loss += loss
            n_batches += 1
        epoch_loss /= n_batches
        trace.append(epoch_loss)
        epochs_run = epoch + 1
        collapsed = collapse(covers, binarize_readout)
        train_err = float((forward_hard(collapsed, train_x) != train_y).mean())
        if epoch_loss < schedule.loss_stop or train_err == 0.0:
            break
        beta *= schedule.beta_growth
        lr *= schedule.lr_decay
        coupling = min(coupling * schedule.coupling_growth, schedule.coupling_max)
    collapsed = collapse(covers, binarize_readout)
    test_err = float((forward_hard(collapsed, test_x) != test_y).mean())
    train_err = float((forward_hard(collapsed, train_x) != train_y).mean())
    return CommitteeRunResult(test_error=test_err, train_error=train_err,
                              final_loss=trace[-1], epochs_run=epochs_run,
                              loss_trace=trace, collapsed=collapsed)
