"""Replicated MLP trained with cover-mixed block messages.

Each layer first forms coherent per-cover block contributions
C[g, a] = sum_{i in g} W[a, r, i] * h[a, i], then mixes them across covers
with a per-(neuron, block) row-stochastic mixer before the bias and
rectifier.  The backward pass transports errors through the transposed
mixers, so every weight copy receives exactly the error generated by the
routed computations it fed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .routing import MixKernel, sample_bank, empirical_mixer, _mcmc_sample_batch, \
    enumerate_permutation_law, EXACT_SAMPLING_MAX_M

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer widths plus the per-layer partition of input coordinates into blocks."""

    layer_dims: tuple
    block_counts: tuple = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {dims}")
        if self.block_counts is None:
            counts = tuple(min(16 if l == 0 else 8, dims[l]) for l in range(len(dims) - 1))
        else:
            counts = tuple(int(g) for g in self.block_counts)
            if len(counts) != len(dims) - 1:
                raise ValueError("need one block count per weight layer")
            if any(not 1 <= g <= dims[l] for l, g in enumerate(counts)):
                raise ValueError("block counts must be in [1, input width] per layer")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "block_counts", counts)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def block_slices(self, layer: int):
        """Contiguous near-equal blocks partitioning the layer's input coordinates."""
        d_in = self.layer_dims[layer]
        bounds = np.linspace(0, d_in, self.block_counts[layer] + 1).astype(int)
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def forward_flops(self, m: int, batch: int):
        """Per-layer multiply counts (block stage, mixing stage) of the lifted forward."""
        out = []
        for l in range(self.n_layers):
            d_in, d_out = self.layer_dims[l], self.layer_dims[l + 1]
            out.append((m * batch * d_in * d_out,
                        m * m * batch * d_out * self.block_counts[l]))
        return out


class MlpCoverEnsemble:
    """M weight/bias copies per layer plus their quenched mixers."""

    def __init__(self, arch: MlpArchitecture, weights, biases, mixers):
        self.arch = arch
        self.weights = weights    # per layer (M, d_out, d_in)
        self.biases = biases      # per layer (M, d_out)
        self.mixers = mixers      # per layer (d_out, G, M, M), rows sum to 1
        self.m = weights[0].shape[0]
        # cached matmul forms: qm[r] maps stacked (g, a) block messages to covers
        self._qm = []
        self._qm_t = []
        for mix in mixers:
            d_out, g, m, _ = mix.shape
            qm = np.ascontiguousarray(mix.transpose(0, 2, 1, 3)).reshape(d_out, m, g * m)
            self._qm.append(qm)
            self._qm_t.append(np.ascontiguousarray(qm.transpose(0, 2, 1)))

    @property
    def dtype(self):
        return self.weights[0].dtype

    def parameters(self):
        """Flat list of all trainable arrays (weights then bias per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_ensemble(arch: MlpArchitecture, m: int, kernel_mixers,
                  rng: np.random.Generator, init_noise: float = 1e-2,
                  dtype=np.float64) -> MlpCoverEnsemble:
    """Shared He-normal draw per layer plus independent Gaussian per-cover noise."""
    weights, biases = [], []
    for l in range(arch.n_layers):
        d_in, d_out = arch.layer_dims[l], arch.layer_dims[l + 1]
        shared_w = rng.normal(0.0, math.sqrt(2.0 / d_in), size=(d_out, d_in))
        shared_b = np.zeros(d_out)
        w = shared_w[None] + init_noise * rng.normal(0.0, 1.0, size=(m, d_out, d_in))
        b = shared_b[None] + init_noise * rng.normal(0.0, 1.0, size=(m, d_out))
        weights.append(w.astype(dtype))
        biases.append(b.astype(dtype))
    return MlpCoverEnsemble(arch, weights, biases,
                            [mx.astype(dtype) for mx in kernel_mixers])


def build_mixers(arch: MlpArchitecture, kernel: MixKernel, s_perm: int,
                 mode: str, rng: np.random.Generator,
                 shared_per_layer: bool = False):
    """Per-(layer, neuron, block) mixers from sampled banks, or the kernel itself.

    ``mode='empirical'`` collapses an independent S_perm-permutation bank per
    (neuron, block) slot (one bank per layer if ``shared_per_layer``);
    ``mode='exact'`` uses the balanced kernel everywhere.
    """
    m = kernel.m
    mixers = []
    for l in range(arch.n_layers):
        d_out = arch.layer_dims[l + 1]
        g = arch.block_counts[l]
        if mode == "exact":
            mix = np.broadcast_to(kernel.entries, (d_out, g, m, m)).copy()
        elif mode == "empirical":
            n_banks = 1 if shared_per_layer else d_out * g
            if m <= EXACT_SAMPLING_MAX_M:
                perms, probs = enumerate_permutation_law(kernel)
                idx = rng.choice(perms.shape[0], size=(n_banks, s_perm), p=probs)
                drawn = perms[idx]                      # (n_banks, S, M)
            else:
                drawn = _mcmc_sample_batch(kernel, n_banks * s_perm, rng)
                drawn = drawn.reshape(n_banks, s_perm, m)
            onehot = drawn[:, :, :, None] == np.arange(m)[None, None, None, :]
            mix = onehot.sum(axis=1) / s_perm           # (n_banks, M, M)
            if shared_per_layer:
                mix = np.broadcast_to(mix[0], (d_out, g, m, m)).copy()
            else:
                mix = mix.reshape(d_out, g, m, m)
        else:
            raise ValueError(f"unknown mixer mode {mode!r}")
        mixers.append(mix)
    return mixers


@dataclass
class ForwardTape:
    """Everything needed to rerun the backward pass of one lifted forward."""

    inputs: list          # h per layer; inputs[0] is the (B, d0) batch
    contributions: list   # per layer (G, M, B, d_out)
    preacts: list         # per layer (M, B, d_out), bias included
    masks: list           # rectifier masks for hidden layers, None at output
    flops: list           # per layer (block_mults, mix_mults)


def _mix_forward(ensemble: MlpCoverEnsemble, layer: int, c: np.ndarray) -> np.ndarray:
    g, m, b, d_out = c.shape
    c_r = np.ascontiguousarray(c.transpose(3, 0, 1, 2)).reshape(d_out, g * m, b)
    a = np.matmul(ensemble._qm[layer], c_r)              # (d_out, M, B)
    return np.ascontiguousarray(a.transpose(1, 2, 0))


def _mix_backward(ensemble: MlpCoverEnsemble, layer: int, da: np.ndarray,
                  g: int) -> np.ndarray:
    m, b, d_out = da.shape
    da_r = np.ascontiguousarray(da.transpose(2, 0, 1))   # (d_out, M, B)
    dc_r = np.matmul(ensemble._qm_t[layer], da_r)        # (d_out, G*M, B)
    dc = dc_r.reshape(d_out, g, m, b)
    return np.ascontiguousarray(dc.transpose(1, 2, 3, 0))


def lifted_forward(ensemble: MlpCoverEnsemble, x: np.ndarray,
                   check_tape: bool = False):
    """Run the mixed block-message forward pass.

    Returns ``(logits, tape)`` with per-cover logits of shape (M, B, d_L).
    ``check_tape`` re-derives every preactivation from the raw mixers and
    asserts agreement to 1e-10 (debug aid; quadratic in M*G).
    """
    arch = ensemble.arch
    if x.ndim != 2 or x.shape[1] != arch.layer_dims[0]:
        raise ValueError(
            f"batch shape {x.shape} does not match input width {arch.layer_dims[0]}")
    b = x.shape[0]
    h = x.astype(ensemble.dtype, copy=False)
    inputs, contribs, preacts, masks, flops = [], [], [], [], []
    for l in range(arch.n_layers):
        inputs.append(h)
        w = ensemble.weights[l]
        slices = arch.block_slices(l)
        c = np.stack([
            np.matmul(h[..., sl], w[:, :, sl].transpose(0, 2, 1)) for sl in slices
        ])                                               # (G, M, B, d_out)
        a = _mix_forward(ensemble, l, c) + ensemble.biases[l][:, None, :]
        if check_tape:
            ref = np.einsum("rgds,gsnr->dnr", ensemble.mixers[l], c,
                            optimize=True) + ensemble.biases[l][:, None, :]
            err = np.abs(ref - a).max()
            if err > 1e-10:
                raise AssertionError(f"preactivation identity violated by {err:.3e}")
        contribs.append(c)
        preacts.append(a)
        d_in, d_out = arch.layer_dims[l], arch.layer_dims[l + 1]
        flops.append((ensemble.m * b * d_in * d_out,
                      ensemble.m * ensemble.m * b * d_out * len(slices)))
        if l < arch.n_layers - 1:
            mask = a > 0
            h = a * mask
            masks.append(mask)
        else:
            masks.append(None)
            h = a
    tape = ForwardTape(inputs=inputs, contributions=contribs, preacts=preacts,
                       masks=masks, flops=flops)
    return h, tape


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE over covers and batch; returns ``(loss, dlogits)``."""
    m, b, _ = logits.shape
    z = logits - logits.max(axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        ez = np.exp(z)
    sz = ez.sum(axis=-1, keepdims=True)
    log_probs = z - np.log(sz)
    picked = log_probs[:, np.arange(b), labels]
    loss = float(-picked.mean())
    dlogits = ez / sz
    dlogits[:, np.arange(b), labels] -= 1.0
    return loss, dlogits / (m * b)


def lifted_backward(ensemble: MlpCoverEnsemble, tape: ForwardTape,
                    labels: np.ndarray):
    """Gradients of the mean routed cross-entropy for every cover copy.

    Returns ``(loss, weight_grads, bias_grads)`` with per-layer arrays
    matching the ensemble's shapes.
    """
    arch = ensemble.arch
    logits = tape.preacts[-1]
    loss, da = cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite lifted loss {loss}")
    w_grads = [None] * arch.n_layers
    b_grads = [None] * arch.n_layers
    for l in range(arch.n_layers - 1, -1, -1):
        slices = arch.block_slices(l)
        b_grads[l] = da.sum(axis=1)
        dc = _mix_backward(ensemble, l, da, len(slices))
        h = tape.inputs[l]
        w = ensemble.weights[l]
        dw = np.empty_like(w)
        dh = np.zeros(h.shape, dtype=ensemble.dtype) if l > 0 else None
        for g, sl in enumerate(slices):
            h_g = h[..., sl]
            dw[:, :, sl] = np.matmul(dc[g].transpose(0, 2, 1), h_g)
            if l > 0:
                dh[..., sl] = np.matmul(dc[g], w[:, :, sl])
        w_grads[l] = dw
        if l > 0:
            da = dh * tape.masks[l - 1]
    return loss, w_grads, b_grads


def lifted_loss(ensemble: MlpCoverEnsemble, x: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = lifted_forward(ensemble, x)
    loss, _ = cross_entropy(logits, labels)
    return loss


def sgd_momentum_step(params, grads, velocities, lr: float, momentum: float,
                      nesterov: bool = False) -> None:
    """In-place v <- momentum*v - lr*g; Nesterov applies the lookahead form."""
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v -= lr * g
        if nesterov:
            p += momentum * v - lr * g
        else:
            p += v


def collapse_mlp(ensemble: MlpCoverEnsemble):
    """Average covers into a single network: ``(weights, biases)`` per layer."""
    weights = [w.mean(axis=0) for w in ensemble.weights]
    biases = [b.mean(axis=0) for b in ensemble.biases]
    return weights, biases


def forward_single(weights, biases, x: np.ndarray) -> np.ndarray:
    """Reference single-network forward pass (rectifier hiddens, identity output)."""
    h = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        a = h @ w.T + b
        h = a if l == last else np.maximum(a, 0.0)
    return h


def classification_error(weights, biases, x: np.ndarray, labels: np.ndarray,
                         eval_batch: int = 4096) -> float:
    """Hard top-1 error of the single network, evaluated in batches."""
    wrong = 0
    for start in range(0, x.shape[0], eval_batch):
        logits = forward_single(weights, biases, x[start:start + eval_batch])
        wrong += int((logits.argmax(axis=1) != labels[start:start + eval_batch]).sum())
    return wrong / x.shape[0]


def save_checkpoint(path, ensemble: MlpCoverEnsemble) -> None:
    """Versioned binary container: shape headers live in the arrays themselves."""
    payload = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "dtype_flag": np.array(str(ensemble.dtype)),
        "layer_dims": np.array(ensemble.arch.layer_dims),
        "block_counts": np.array(ensemble.arch.block_counts),
        "n_covers": np.array(ensemble.m),
    }
    for l in range(ensemble.arch.n_layers):
        payload[f"weights_{l}"] = ensemble.weights[l]
        payload[f"biases_{l}"] = ensemble.biases[l]
        payload[f"mixers_{l}"] = ensemble.mixers[l]
    np.savez_compressed(path, **payload)


def load_checkpoint(path) -> MlpCoverEnsemble:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = MlpArchitecture(tuple(z["layer_dims"]), tuple(z["block_counts"]))
        n_layers = arch.n_layers
        weights = [z[f"weights_{l}"] for l in range(n_layers)]
        biases = [z[f"biases_{l}"] for l in range(n_layers)]
        mixers = [z[f"mixers_{l}"] for l in range(n_layers)]
    return MlpCoverEnsemble(arch, weights, biases, mixers)


@dataclass
class MlpRunResult:
    test_error: float
    train_error: float
    final_loss: float
    epochs_run: int
    loss_trace: list
    error_trace: list


def train_mlp(ensemble: MlpCoverEnsemble, train_x, train_y, test_x, test_y,
              epochs: int, batch_size: int, lr: float, momentum: float,
              nesterov: bool, rng: np.random.Generator,
              eval_batch: int = 4096) -> MlpRunResult:
    """Minibatch training of the lifted network; evaluates the collapsed net per epoch."""
    params = ensemble.parameters()
    velocities = [np.zeros_like(p) for p in params]
    p_total = train_x.shape[0]
    trace, err_trace = [], []
    for epoch in range(epochs):
        order = rng.permutation(p_total)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, p_total, batch_size):
            sel = order[start:start + batch_size]
            logits, tape = lifted_forward(ensemble, train_x[sel])
            loss, w_grads, b_grads = lifted_backward(ensemble, tape, train_y[sel])
            grads = []
            for wg, bg in zip(w_grads, b_grads):
                grads.append(wg)
                grads.append(bg)
            sgd_momentum_step(params, grads, velocities, lr, momentum, nesterov)
            epoch_loss += loss
            n_batches += 1
        trace.append(epoch_loss / n_batches)
        weights, biases = collapse_mlp(ensemble)
        err_trace.append(classification_error(weights, biases, test_x, test_y,
                                              eval_batch))
    weights, biases = collapse_mlp(ensemble)
    test_err = classification_error(weights, biases, test_x, test_y, eval_batch)
    train_err = classification_error(weights, biases, train_x, train_y, eval_batch)
    return MlpRunResult(test_error=test_err, train_error=train_err,
                        final_loss=trace[-1], epochs_run=epochs,
                        loss_trace=trace, error_trace=err_trace)
