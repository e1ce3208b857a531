# SECTION: Necessary imports
import math

import torch
from lightning.pytorch.utilities.rank_zero import rank_zero_debug

from .errors import NumericalFailure, PreconditionError
from .kernels import DTYPE, KernelParams, NoiseParams, as_points, jitter_cholesky, kernel_matrix, whiten
#!SECTION

# SECTION: Constants
DUPLICATE_PI_TOL = 1e-9
#!SECTION

# SECTION: Helpers
def symmetrize(cov):
    # Drift from long chains of rank-1 updates shows up as asymmetry and tiny negative variances
    cov = 0.5 * (cov + cov.T)
    torch.diagonal(cov).clamp_(min=0.0)
    return cov


def cholesky_add_row(L, k_new, k_self):
    '''
    Extends the lower Cholesky factor of K by one row and column.

    Args:
        L: [U, U] factor of K
        k_new: [U] covariances between the old inputs and the new one
        k_self: prior variance of the new input

    Returns:
        The [U+1, U+1] factor, or None when the new pivot is not safely positive
    '''
    c = whiten(L, k_new.unsqueeze(1)).squeeze(1)
    d2 = k_self - torch.dot(c, c).item()
    if d2 <= 1e-12 * k_self:
        return None
    u = L.size(0)
    L_new = torch.zeros(u + 1, u + 1, dtype=DTYPE)
    L_new[:u, :u] = L
    L_new[u, :u] = c
    L_new[u, u] = math.sqrt(d2)
    return L_new
#!SECTION

# SECTION: FITC sparse GP
class SparseGP:
    '''
    FITC sparse Gaussian process over a set of pseudo-inputs (PIs).

    The model stores the Gaussian posterior N(mean, cov) over the latent function values at
    the PIs. Every operation returns a new SparseGP; tensors are never modified in place after
    construction. The Cholesky factor of K_uu is cached per instance and dropped whenever the
    PI set changes.
    '''
    def __init__(self, pis, mean, cov, kp, noise, chol=None):
        self.pis = as_points(pis)
        self.mean = torch.as_tensor(mean, dtype=DTYPE).reshape(-1)
        self.cov = torch.as_tensor(cov, dtype=DTYPE).reshape(self.mean.numel(), self.mean.numel())
        self.kp = kp
        self.noise = noise
        self._chol = chol
        assert self.pis.size(0) == self.mean.numel(), \
            f"{self.pis.size(0)} pseudo-inputs but a mean vector of size {self.mean.numel()}"

    def __len__(self):
        return self.pis.size(0)

    def __repr__(self):
        return f"SparseGP(n_pis={len(self)}, R={self.kp.R}, sigma2={self.noise.sigma2})"

    @property
    def chol(self):
        if self._chol is None:
            self._chol = jitter_cholesky(kernel_matrix(self.pis, self.pis, self.kp), self.kp, what="K_uu")
        return self._chol

    # SECTION: Construction
    @classmethod
    def prior(cls, pis, kp, noise):
        """Model that has seen no data: zero mean and covariance K_uu."""
        pis = as_points(pis)
        if pis.size(0) == 0:
            raise PreconditionError("A sparse GP needs at least one pseudo-input")
        K = kernel_matrix(pis, pis, kp)
        return cls(pis, torch.zeros(pis.size(0), dtype=DTYPE), K.clone(), kp, noise)

    @classmethod
    def fitc_init(cls, pis, batch, noise, kp):
        '''
        Batch FITC posterior over the PIs given a measurement batch. Computed in the whitened
        form V = L_uu^-1 K_um, A = I + V D V^T with D = (Lambda + sigma^2 I)^-1, which gives
            mean = L_uu A^-1 V D y,    cov = L_uu A^-1 L_uu^T.

        Args:
            pis: [U, 2] pseudo-input locations
            batch: MeasurementBatch with at least one entry
            noise: NoiseParams
            kp: KernelParams
        '''
        pis = as_points(pis)
        if pis.size(0) == 0:
            raise PreconditionError("fitc_init needs at least one pseudo-input")
        if len(batch) == 0:
            raise PreconditionError("fitc_init needs a nonempty measurement batch")
        X = as_points(batch.locations)
        y = torch.as_tensor(batch.values, dtype=DTYPE)

        L = jitter_cholesky(kernel_matrix(pis, pis, kp), kp, what="K_uu")
        V = whiten(L, kernel_matrix(pis, X, kp))                                    # [U, M]
        lam = torch.clamp(kp.R ** 2 - torch.sum(V * V, dim=0), min=0.0)            # diag(K_mm - Q_mm)
        d = 1.0 / (lam + noise.sigma2)

        A = torch.eye(pis.size(0), dtype=DTYPE) + (V * d) @ V.T
        LA = jitter_cholesky(A, kp, what=f"FITC system of a {len(batch)}-measurement batch")
        b = V @ (d * y)
        mean = L @ torch.cholesky_solve(b.unsqueeze(1), LA).squeeze(1)
        cov = L @ torch.cholesky_inverse(LA) @ L.T
        return cls(pis, mean, symmetrize(cov), kp, noise, chol=L)
    #!SECTION

    # SECTION: Prediction
    def predict(self, Xs, full_cov=True):
        '''
        Posterior at trial points:
            mean = K_*u K_uu^-1 mean_u
            cov  = K_** - K_*u K_uu^-1 (K_uu - cov_u) K_uu^-1 K_u*

        Returns:
            (mean [S], covariance [S, S]) or (mean [S], variance [S]) when full_cov is False
        '''
        Xs = as_points(Xs)
        L = self.chol
        Vs = whiten(L, kernel_matrix(self.pis, Xs, self.kp))                       # [U, S]
        mean = Vs.T @ whiten(L, self.mean.unsqueeze(1)).squeeze(1)

        # B = L^-1 cov_u L^-T
        B = whiten(L, whiten(L, self.cov).T)
        if full_cov:
            cov = kernel_matrix(Xs, Xs, self.kp) - Vs.T @ Vs + Vs.T @ B @ Vs
            return mean, 0.5 * (cov + cov.T)
        var = self.kp.R ** 2 - torch.sum(Vs * Vs, dim=0) + torch.sum(Vs * (B @ Vs), dim=0)
        return mean, var

    def predict_mean(self, Xs):
        Xs = as_points(Xs)
        if Xs.size(0) == 0:
            return torch.zeros(0, dtype=DTYPE)
        L = self.chol
        Vs = whiten(L, kernel_matrix(self.pis, Xs, self.kp))
        return Vs.T @ whiten(L, self.mean.unsqueeze(1)).squeeze(1)

    def removal_predictions(self, Xs, candidates):
        '''
        Mean predictions at Xs of every model obtained by removing one of the candidate PIs.
        Uses the block-inverse downdate of K_uu^-1 instead of refactorizing per candidate:
            alpha' = alpha_{-p} - Kinv_{-p,p} alpha_p / Kinv_pp

        Returns:
            [S, len(candidates)] predicted means
        '''
        Xs = as_points(Xs)
        cand = torch.as_tensor(candidates, dtype=torch.long).reshape(-1)
        Kinv = torch.cholesky_inverse(self.chol)
        alpha = Kinv @ self.mean
        Ksu = kernel_matrix(Xs, self.pis, self.kp)
        G = Ksu @ Kinv[:, cand]
        scale = alpha[cand] / torch.diagonal(Kinv)[cand]
        return (Ksu @ alpha).unsqueeze(1) - G * scale.unsqueeze(0)
    #!SECTION

    # SECTION: Online update
    def _projections(self, X):
        # v = L^-1 K_u+, w = K_uu^-1 K_u+ for every column of X
        L = self.chol
        V = whiten(L, kernel_matrix(self.pis, X, self.kp))
        W = torch.linalg.solve_triangular(L.T, V, upper=True)
        return V, W

    def update(self, x_plus, y_plus):
        """Rank-1 posterior update with one measurement; the PI set is unchanged."""
        return self.update_many(as_points(x_plus), [float(y_plus)])

    def update_many(self, X, y):
        '''
        Applies the single-measurement update to every row of X in order. The PI set does not
        change, so all projections onto the PIs are computed once up front.
        '''
        X = as_points(X)
        y = torch.as_tensor(y, dtype=DTYPE).reshape(-1)
        assert X.size(0) == y.numel(), f"{X.size(0)} locations but {y.numel()} targets"
        if X.size(0) == 0:
            return self

        V, W = self._projections(X)
        prior_var = self.kp.R ** 2 - torch.sum(V * V, dim=0)
        mean, cov = self.mean.clone(), self.cov.clone()
        for i in range(X.size(0)):
            w = W[:, i]
            c = cov @ w                                                             # Sigma_u+
            mu_plus = torch.dot(w, mean)
            var_plus = torch.clamp(prior_var[i] + torch.dot(w, c), min=0.0)
            s = (var_plus + self.noise.sigma2).item()
            if not (math.isfinite(s) and s > 0.0):
                raise NumericalFailure(f"Non-positive innovation variance {s} for measurement {i} of the update")
            mean = mean + c * ((y[i] - mu_plus) / s)
            cov = symmetrize(cov - torch.outer(c, c) / s)
        return SparseGP(self.pis, mean, cov, self.kp, self.noise, chol=self._chol)
    #!SECTION

    # SECTION: Pseudo-input insertion and removal
    def insert(self, x_new, position=None):
        '''
        Adds a PI and extends the posterior with the model's own prediction there. Predictions
        anywhere are unchanged by the insertion.

        Args:
            x_new: location of the new PI
            position: index the new PI takes in the PI list (default: appended at the end)
        '''
        x_new = as_points(x_new)
        assert x_new.size(0) == 1, "insert takes a single location"
        u = len(self)
        dists = torch.linalg.norm(self.pis - x_new, dim=1)
        if u and dists.min().item() < DUPLICATE_PI_TOL:
            raise PreconditionError(f"{x_new.tolist()[0]} is already a pseudo-input")

        V, W = self._projections(x_new)
        v, w = V[:, 0], W[:, 0]
        c = self.cov @ w
        mu_new = torch.dot(w, self.mean)
        var_new = torch.clamp(self.kp.R ** 2 - torch.dot(v, v) + torch.dot(w, c), min=0.0)

        mean = torch.cat([self.mean, mu_new.reshape(1)])
        cov = torch.zeros(u + 1, u + 1, dtype=DTYPE)
        cov[:u, :u] = self.cov
        cov[:u, u] = c
        cov[u, :u] = c
        cov[u, u] = var_new
        chol = cholesky_add_row(self.chol, kernel_matrix(self.pis, x_new, self.kp)[:, 0], self.kp.R ** 2)
        gp = SparseGP(torch.cat([self.pis, x_new]), mean, symmetrize(cov), self.kp, self.noise, chol=chol)

        if position is None or position == u:
            return gp
        if not 0 <= position <= u:
            raise PreconditionError(f"Insert position {position} out of range for {u} pseudo-inputs")
        order = list(range(position)) + [u] + list(range(position, u))
        return gp.select(order)

    def select(self, indices):
        '''
        Marginal posterior over a subset (or permutation) of the PIs.
        '''
        idx = torch.as_tensor(indices, dtype=torch.long).reshape(-1)
        if idx.numel() == 0:
            raise PreconditionError("A sparse GP must keep at least one pseudo-input")
        cov = self.cov.index_select(0, idx).index_select(1, idx)
        return SparseGP(self.pis[idx], self.mean[idx], symmetrize(cov), self.kp, self.noise)

    def remove(self, index):
        """Drops one PI by marginalizing its row and column out of the posterior."""
        u = len(self)
        if not 0 <= index < u:
            raise PreconditionError(f"PI index {index} out of range for {u} pseudo-inputs")
        if u < 2:
            raise PreconditionError("Cannot remove the last remaining pseudo-input")
        rank_zero_debug(f"Removing PI {index} of {u}")
        return self.select([i for i in range(u) if i != index])
    #!SECTION

    # SECTION: Serialization
    def to_dict(self):
        return {
            'pis': self.pis.tolist(),
            'mean': self.mean.tolist(),
            'cov': self.cov.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, state, kp, noise):
        n = len(state['mean'])
        assert len(state['cov']) == n * n, f"Covariance of a {n}-PI model must have {n * n} entries"
        return cls(state['pis'], state['mean'], torch.tensor(state['cov'], dtype=DTYPE).reshape(n, n), kp, noise)
    #!SECTION
#!SECTION
