"""Unrolled ISTA networks with learned step sizes and centre filters.

Two block structures are supported, for ``n = 0..N-1`` and group ``g(n)``:

* ``F``: ``w <- S_gamma(w + alpha (b - beta (Kfix w + Lambda_zeta w)))``
  where ``Kfix`` is the filter bank with its centre windows removed.
* ``O``: ``w <- S_gamma(w + alpha (b - K w) + beta Lambda_zeta w)``
  with the exact operator ``K = W R* R W*``.

``Lambda_zeta`` applies the small ``zeta`` filters with the same subband
scheme as the full bank.  Gradients are propagated by hand through the
unrolled blocks.  Everything runs on batches of packed coefficient arrays
of shape ``(S, n, n)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalFailure
from .ista import IstaConfig, soft_threshold, soft_threshold_grads
from .opbank import (FilterBank, TruncatedBank, apply_operator, apply_transpose, bank_keys,
                     filter_gradients, filter_side)
from .tomo import backproject, normal_operator
from .wavelet import dwt2_array, idwt2_array

VARIANTS = ("F", "O")
LN10 = math.log(10.0)


def center_layout(spec, tau):
    """Shape and zero-offset position of every centre filter for ``tau``."""
    out = {}
    for key in bank_keys(spec):
        t = min(tau, filter_side(key))
        out[key] = ((t, t), (t // 2, t // 2))
    return out


@dataclass
class ModelParams:
    variant: str
    n_blocks: int
    n_groups: int
    tau: int
    positivity: bool
    gamma: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    zeta: list

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"variant must be one of {VARIANTS}")
        if self.n_groups < 1 or self.n_blocks < 0 or (self.n_blocks and self.n_blocks % self.n_groups):
            raise InvalidArgument("the number of groups must divide the number of blocks")
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(self.n_groups)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(self.n_groups)
        self.beta = np.asarray(self.beta, dtype=float).reshape(self.n_groups)
        if len(self.zeta) != self.n_groups:
            raise InvalidArgument("one zeta map per group is required")

    def group(self, n):
        return n * self.n_groups // self.n_blocks

    def effective_gamma(self, g):
        return 10.0 ** self.gamma[g] if self.positivity else self.gamma[g]

    @property
    def keys(self):
        return list(self.zeta[0])

    def check_keys(self, spec):
        expected = bank_keys(spec)
        layout = center_layout(spec, self.tau)
        for zg in self.zeta:
            if list(zg) != expected:
                raise InvalidArgument("zeta keys do not match the filter bank key set")
            for key, z in zg.items():
                if z.shape != layout[key][0]:
                    raise InvalidArgument(f"zeta[{key}] has shape {z.shape}, expected {layout[key][0]}")

    def to_vector(self):
        parts = [self.gamma, self.alpha, self.beta]
        for zg in self.zeta:
            parts.extend(z.ravel() for z in zg.values())
        return np.concatenate(parts)

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        G = self.n_groups
        if vec.size != self.to_vector().size:
            raise InvalidArgument("parameter vector has the wrong length")
        zeta, pos = [], 3 * G
        for zg in self.zeta:
            new = {}
            for key, z in zg.items():
                new[key] = vec[pos:pos + z.size].reshape(z.shape).copy()
                pos += z.size
            zeta.append(new)
        return ModelParams(self.variant, self.n_blocks, self.n_groups, self.tau, self.positivity,
                           vec[:G].copy(), vec[G:2 * G].copy(), vec[2 * G:3 * G].copy(), zeta)

    def copy(self):
        return self.with_vector(self.to_vector())

    def zeros_like(self):
        return self.with_vector(np.zeros_like(self.to_vector()))

    def descriptor(self):
        return {"variant": self.variant, "n_blocks": self.n_blocks, "n_groups": self.n_groups,
                "tau": self.tau, "positivity": self.positivity}


def ista_point(variant, spec, n_blocks, n_groups, tau, cfg=IstaConfig(), positivity=False,
               tbank=None):
    """Parameters under which the network performs plain ISTA steps.

    ``F`` starts from the bank's own centre windows (``tbank`` required),
    ``O`` from zero filters with ``beta = 0``.
    """
    layout = center_layout(spec, tau)
    gamma0 = cfg.lam / cfg.L
    if positivity:
        if gamma0 <= 0:
            raise InvalidArgument("positivity needs lambda > 0")
        gamma0 = math.log10(gamma0)
    if variant == "F":
        if tbank is None or tbank.tau != tau:
            raise InvalidArgument("the F variant needs a truncated bank with matching tau")
        zeta0 = {k: tbank.centers[k].copy() for k in layout}
        beta0 = 1.0
    elif variant == "O":
        zeta0 = {k: np.zeros(shape) for k, (shape, _) in layout.items()}
        beta0 = 0.0
    else:
        raise InvalidArgument(f"variant must be one of {VARIANTS}")
    G = n_groups
    return ModelParams(variant, n_blocks, G, tau, positivity, np.full(G, gamma0),
                       np.full(G, 1.0 / cfg.L), np.full(G, beta0),
                       [{k: v.copy() for k, v in zeta0.items()} for _ in range(G)])


class ExactOperator:
    """``w -> W R* R W* w`` on packed coefficient arrays."""

    def __init__(self, geom, spec):
        if geom.image_side != spec.side:
            raise InvalidArgument("geometry and wavelet sides differ")
        self.geom, self.spec = geom, spec
        self._normal = normal_operator(geom)

    def __call__(self, w):
        return dwt2_array(self._normal(idwt2_array(w, self.spec)), self.spec)

    def rhs(self, sino):
        """``b = W R* m``."""
        return dwt2_array(backproject(sino, self.geom), self.spec)


@dataclass
class BlockCache:
    w: np.ndarray
    x: np.ndarray
    q: np.ndarray   # F: Kfix w + Lambda w;  O: K w
    lw: np.ndarray  # O: Lambda w (unused for F)


class Network:
    """Forward and backward passes for one variant on fixed operators.

    ``F`` needs ``tbank``; ``O`` needs ``exact`` (an :class:`ExactOperator`).
    ``mode`` selects the exact or fast subband scheme for the bank filters.
    """

    def __init__(self, variant, spec, tau, tbank=None, exact=None, mode=None):
        if variant not in VARIANTS:
            raise InvalidArgument(f"variant must be one of {VARIANTS}")
        if variant == "F" and (tbank is None or tbank.tau != tau):
            raise InvalidArgument("the F variant needs a truncated bank with matching tau")
        if variant == "O" and exact is None:
            raise InvalidArgument("the O variant needs the exact operator")
        self.variant, self.spec, self.tau = variant, spec, tau
        self.tbank, self.exact = tbank, exact
        self.mode = mode or ("fast" if variant == "F" else "exact")
        self.layout = center_layout(spec, tau)
        self._centers = {k: c for k, (_, c) in self.layout.items()}

    def _lambda_bank(self, zeta):
        return FilterBank(self.spec, zeta, centers=self._centers)

    def fixed_apply(self, w):
        return apply_operator(self.tbank.fixed, w, self.mode)

    def conv_ista_operator(self, zeta):
        """``w -> Kfix w + Lambda_zeta w`` as used by the F blocks."""
        lb = self._lambda_bank(zeta)
        return lambda w: self.fixed_apply(w) + apply_operator(lb, w, self.mode)

    def forward(self, params, b, w0=None, keep=False):
        """Run all blocks; returns ``(w_N, caches)``, caches empty unless ``keep``."""
        if params.variant != self.variant or params.tau != self.tau:
            raise InvalidArgument("parameters do not belong to this network")
        params.check_keys(self.spec)
        b = np.asarray(b, dtype=float)
        w = np.zeros_like(b) if w0 is None else np.array(w0, dtype=float)
        banks = [self._lambda_bank(z) for z in params.zeta]
        caches = []
        for n in range(params.n_blocks):
            g = params.group(n)
            alpha, beta = params.alpha[g], params.beta[g]
            if self.variant == "F":
                q = self.fixed_apply(w) + apply_operator(banks[g], w, self.mode)
                x = w + alpha * (b - beta * q)
                lw = None
            else:
                q = self.exact(w)
                lw = apply_operator(banks[g], w, self.mode)
                x = w + alpha * (b - q) + beta * lw
            w_next = soft_threshold(x, params.effective_gamma(g))
            if not np.all(np.isfinite(w_next)):
                raise NumericalFailure(f"non-finite activation in block {n}", index=n)
            if keep:
                caches.append(BlockCache(w, x, q, lw))
            w = w_next
        return w, caches

    def blocks(self, params, b, w0=None):
        """All intermediate iterates ``w^(0) .. w^(N)``."""
        _, caches = self.forward(params, b, w0, keep=True)
        w_final, _ = self.forward(params, b, w0)
        return [c.w for c in caches] + [w_final]

    def backward(self, params, b, caches, grad_out):
        """Gradient of ``<grad_out, w_N>`` with respect to all parameters."""
        grads = params.zeros_like()
        banks = [self._lambda_bank(z) for z in params.zeta]
        b = np.asarray(b, dtype=float)
        dw = np.asarray(grad_out, dtype=float)
        for n in range(params.n_blocks - 1, -1, -1):
            g = params.group(n)
            c = caches[n]
            alpha, beta = params.alpha[g], params.beta[g]
            gam = params.effective_gamma(g)
            sx, sg = soft_threshold_grads(c.x, gam)
            dgam = float(np.sum(dw * sg))
            grads.gamma[g] += dgam * gam * LN10 if params.positivity else dgam
            dx = dw * sx
            if self.variant == "F":
                grads.alpha[g] += float(np.vdot(dx, b - beta * c.q))
                grads.beta[g] += float(np.vdot(dx, -alpha * c.q))
                dq = -alpha * beta * dx
                for key, gz in filter_gradients(banks[g], dq, c.w, self.mode).items():
                    grads.zeta[g][key] += gz
                dw = dx + apply_transpose(self.tbank.fixed, dq, self.mode) \
                    + apply_transpose(banks[g], dq, self.mode)
            else:
                grads.alpha[g] += float(np.vdot(dx, b - c.q))
                grads.beta[g] += float(np.vdot(dx, c.lw))
                for key, gz in filter_gradients(banks[g], beta * dx, c.w, self.mode).items():
                    grads.zeta[g][key] += gz
                dw = dx - alpha * self.exact(dx) + beta * apply_transpose(banks[g], dx, self.mode)
            if not np.all(np.isfinite(dw)):
                raise NumericalFailure(f"non-finite gradient in block {n}", index=n)
        return grads

    def loss(self, params, b, target, w0=None):
        """Mean over samples of ``||f(b) - target||^2``."""
        out, _ = self.forward(params, b, w0)
        return _loss_value(out, target)

    def loss_and_grad(self, params, b, target, w0=None):
        b = np.asarray(b, dtype=float)
        target = np.asarray(target, dtype=float)
        if b.ndim != 3 or b.shape[0] == 0:
            raise InvalidArgument("a non-empty batch of shape (S, n, n) is required")
        out, caches = self.forward(params, b, w0, keep=True)
        S = b.shape[0]
        return _loss_value(out, target), self.backward(params, b, caches, 2.0 / S * (out - target))


def _loss_value(out, target):
    out = np.asarray(out, dtype=float)
    if out.ndim == 2:
        out, target = out[None], np.asarray(target)[None]
    diff = out - target
    return float(np.sum(diff * diff) / out.shape[0])


# training ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 3
    batch_size: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: str = "l2-on-wavelet-coeffs"

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise InvalidArgument("learning_rate must be non-negative")
        if self.epochs < 0:
            raise InvalidArgument("epochs must be non-negative")
        if self.loss != "l2-on-wavelet-coeffs":
            raise InvalidArgument(f"unsupported loss {self.loss!r}")


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    history: list = field(default_factory=list)      # per-step training loss
    val_history: list = field(default_factory=list)  # per-epoch validation loss, index 0 = initial
    best_epoch: int = 0


def _batched_loss(net, params, b, target, batch):
    total = 0.0
    for s in range(0, len(b), batch):
        total += net.loss(params, b[s:s + batch], target[s:s + batch]) * len(b[s:s + batch])
    return total / len(b)


def train(net, params, train_data, val_data, cfg=TrainConfig(), log=None):
    """Minibatch Adam on the empirical risk.

    ``train_data`` and ``val_data`` are ``(b, target)`` pairs of arrays with a
    leading sample axis.  Returns the final and best-validation parameters.
    """
    b_tr, w_tr = (np.asarray(a, dtype=float) for a in train_data)
    b_va, w_va = (np.asarray(a, dtype=float) for a in val_data)
    if len(b_tr) == 0 or len(b_va) == 0:
        raise InvalidArgument("training and validation splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    vec = params.to_vector()
    opt = Adam(vec.size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    current = params.copy()
    val0 = _batched_loss(net, current, b_va, w_va, cfg.batch_size)
    result = TrainResult(current, current.copy(), val_history=[val0])
    if log:
        log(f"epoch 0 val_loss {val0:.6e}")
    best = val0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(b_tr))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = net.loss_and_grad(current, b_tr[idx], w_tr[idx])
            result.history.append(loss)
            vec = opt.step(vec, grads.to_vector())
            current = current.with_vector(vec)
        val = _batched_loss(net, current, b_va, w_va, cfg.batch_size)
        result.val_history.append(val)
        if log:
            log(f"epoch {epoch} train_loss {np.mean(result.history[-max(1, len(order) // cfg.batch_size):]):.6e} val_loss {val:.6e}")
        if val < best:
            best, result.best_params, result.best_epoch = val, current.copy(), epoch
    result.params = current
    return result


# checkpoints and inference ------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    spec_descriptor: dict
    geometry_descriptor: dict
    geometry_hash: bytes
    bank_hash: bytes
    mode: str
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)

    def param_hash(self):
        return hashlib.sha256(np.ascontiguousarray(self.params.to_vector(), dtype="<f8").tobytes()).hexdigest()


def truncated_bank_hash(tbank):
    """Hash of a truncated bank (fixed part plus centre windows)."""
    if tbank is None:
        return b"\0" * 32
    h = hashlib.sha256(tbank.fixed.hash())
    h.update(repr(tbank.tau).encode())
    for key in bank_keys(tbank.spec):
        h.update(np.ascontiguousarray(tbank.centers[key], dtype="<f8").tobytes())
    return h.digest()


def make_checkpoint(net, params, geom, history=(), val_history=()):
    return Checkpoint(params.copy(), net.spec.descriptor(), geom.descriptor(), geom.hash(),
                      truncated_bank_hash(net.tbank), net.mode, list(history), list(val_history))


def network_for(checkpoint, geom, tbank=None):
    """Rebuild the network a checkpoint was trained with, checking hashes."""
    from .wavelet import WaveletSpec

    if geom.hash() != checkpoint.geometry_hash:
        raise InvalidArgument("geometry does not match the checkpoint")
    spec = WaveletSpec(**checkpoint.spec_descriptor)
    p = checkpoint.params
    if p.variant == "F":
        if tbank is None or truncated_bank_hash(tbank) != checkpoint.bank_hash:
            raise InvalidArgument("filter bank does not match the checkpoint")
        return Network("F", spec, p.tau, tbank=tbank, mode=checkpoint.mode)
    return Network("O", spec, p.tau, exact=ExactOperator(geom, spec), mode=checkpoint.mode)


def reconstruct(checkpoint, sino, geom, tbank=None):
    """Image reconstructed from a sinogram with ``w0 = 0``."""
    net = network_for(checkpoint, geom, tbank)
    b = dwt2_array(backproject(sino, geom), net.spec)
    w, _ = net.forward(checkpoint.params, b[None])
    return idwt2_array(w[0], net.spec)


# Lemma-type output bound --------------------------------------------------------------

@dataclass
class NormBoundReport:
    measured: float
    bound: float
    kappa: float

    @property
    def passed(self):
        return self.measured <= self.bound


def output_bound(n_blocks, kappa, w0_norm, C_B, A_norm, eps_norm):
    """``kappa^N ||w0|| + C_B + (kappa^N - 1)/(kappa - 1) (||A|| C_B + ||eps||)``."""
    kn = kappa ** n_blocks
    geom_sum = n_blocks if kappa == 1 else (kn - 1) / (kappa - 1)
    return kn * w0_norm + C_B + geom_sum * (A_norm * C_B + eps_norm)


def output_norm_bound_check(net, params, u, eps, geom, K_norm, rho, L, A_norm=1.0, C_B=None,
                            w0=None):
    """Check ``||f(A u + eps) - W u|| <= bound`` for one sample."""
    from .tomo import radon

    spec = net.spec
    wu = dwt2_array(np.asarray(u, dtype=float), spec)
    C_B = float(np.abs(wu).sum()) if C_B is None else float(C_B)
    sino = radon(u, geom) + eps
    b = dwt2_array(backproject(sino, geom), spec)
    w0 = np.zeros_like(b) if w0 is None else np.asarray(w0, dtype=float)
    out, _ = net.forward(params, b[None], w0[None])
    kappa = 1.0 + (K_norm + rho) / L
    bound = output_bound(params.n_blocks, kappa, float(np.linalg.norm(w0)), C_B, A_norm,
                         float(np.linalg.norm(eps)))
    return NormBoundReport(float(np.linalg.norm(out[0] - wu)), bound, kappa)


def kink_margin(net, params, b, w0=None):
    """Smallest distance of any activation to a kink of its soft-threshold.

    The kink sits at ``|x| = gamma`` for ``gamma >= 0`` and at ``x = 0``
    otherwise.
    """
    _, caches = net.forward(params, b, w0, keep=True)
    margin = np.inf
    for n, c in enumerate(caches):
        gam = params.effective_gamma(params.group(n))
        d = np.abs(np.abs(c.x) - gam) if gam >= 0 else np.abs(c.x)
        margin = min(margin, float(d.min()))
    return margin
