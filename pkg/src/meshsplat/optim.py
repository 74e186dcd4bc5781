"""Optimizers on plain numpy parameter dicts.

Adam plus an optional Kronecker-factored curvature preconditioner for
the texel decoder. Kept dependency-free so optimization stays
bit-reproducible: updates are applied in dict insertion order, in
float64, in place.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class KroneckerPreconditioner:
    """Kronecker-factored curvature preconditioning for decoder gradients.

    Keeps exponential moving averages of two second-moment factors over
    the texel rows of a batch: per decoder matrix the input-activation
    covariance A_l = E[h hT] (h is the row entering matrix l), and for
    the output matrix the covariance G = E[g gT] of the per-texel output
    gradient rows. apply() multiplies every decoder weight gradient by
    the damped inverse input factor (dW A^-1) and the output weight and
    bias additionally by the damped inverse output factor (G^-1 dW).
    Damping is relative to the factor's mean diagonal,
    lambda = damping * trace/dim, so it tracks the factor's scale.

    Only decoder matrices are transformed; encoder, conditioning, and
    hidden-bias gradients pass through untouched. All state updates are
    plain float64 numpy, so results are bit-reproducible.
    """

    def __init__(self, n_hidden_layers: int, beta: float = 0.95,
                 damping: float = 0.01):
        if n_hidden_layers < 0:
            raise ContractError(
                "KroneckerPreconditioner: n_hidden_layers must be >= 0")
        if not 0.0 <= beta < 1.0:
            raise ContractError(
                "KroneckerPreconditioner: beta must lie in [0, 1)")
        if damping <= 0.0:
            raise ContractError(
                "KroneckerPreconditioner: damping must be > 0")
        self.beta = float(beta)
        self.damping = float(damping)
        self.n_hidden = int(n_hidden_layers)
        self._a: list = [None] * (self.n_hidden + 1)
        self._g = None

    def _ema(self, old, new):
        if old is None:
            return new
        return self.beta * old + (1.0 - self.beta) * new

    def apply(self, grads: dict, activations: list,
              d_out_rows: np.ndarray) -> dict:
        """Precondition `grads` in place and return it.

        activations: list of length n_hidden+1; entry l stacks the rows
        entering decoder matrix l over the batch, the last entry feeding
        the output matrix. d_out_rows: (T, out) stack of per-texel
        output-gradient rows. Empty stacks leave the factors and the
        gradients unchanged.
        """
        if len(activations) != self.n_hidden + 1:
            raise ContractError(
                f"KroneckerPreconditioner: expected "
                f"{self.n_hidden + 1} activation stacks, "
                f"got {len(activations)}")
        if d_out_rows.shape[0] == 0:
            return grads
        for layer, h in enumerate(activations):
            a = h.T @ h / h.shape[0]
            self._a[layer] = self._ema(self._a[layer], a)
            a = self._a[layer]
            lam = self.damping * np.trace(a) / a.shape[0] + 1e-8
            key = (f"dec_w{layer}" if layer < self.n_hidden
                   else "dec_w_out")
            grads[key] = np.linalg.solve(
                a + lam * np.eye(a.shape[0]), grads[key].T).T
        g = d_out_rows.T @ d_out_rows / d_out_rows.shape[0]
        self._g = self._ema(self._g, g)
        g = self._g
        lam = self.damping * np.trace(g) / g.shape[0] + 1e-12
        damped = g + lam * np.eye(g.shape[0])
        grads["dec_w_out"] = np.linalg.solve(damped, grads["dec_w_out"])
        grads["dec_b_out"] = np.linalg.solve(damped, grads["dec_b_out"])
        return grads


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        if lr < 0:
            raise ContractError("Adam: lr must be >= 0")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ContractError("Adam: betas must lie in [0, 1)")
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        """One update, in place. Every param must have a gradient entry."""
        missing = [k for k in params if k not in grads]
        if missing:
            raise ContractError(f"Adam: missing gradients for {missing}")
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.shape:
                raise ContractError(
                    f"Adam: grad shape {g.shape} != param shape {p.shape} "
                    f"for {name!r}")
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
