# SECTION: Necessary imports
import math
from dataclasses import dataclass

import torch
from lightning.pytorch.utilities.rank_zero import rank_zero_warn

from .errors import NumericalFailure, PreconditionError
#!SECTION

# SECTION: Constants
DTYPE = torch.float64

# Diagonal jitter tried in order, as multiples of R^2. The unjittered attempt comes first.
JITTER_SCALES = (0.0, 1e-8, 1e-6)
#!SECTION

# SECTION: Hyperparameter containers
@dataclass(frozen=True)
class KernelParams:
    '''
    Thin-plate kernel range. R should be the largest distance that occurs in the environment.
    '''
    R: float = 20.0

    def __post_init__(self):
        if not self.R > 0.0:
            raise ValueError(f"Invalid kernel range R: {self.R}")


@dataclass(frozen=True)
class NoiseParams:
    sigma2: float = 0.01

    def __post_init__(self):
        if not self.sigma2 > 0.0:
            raise ValueError(f"Invalid noise variance sigma2: {self.sigma2}")
#!SECTION

# SECTION: Kernel evaluation
def as_points(X):
    '''
    Turns a point, a list of points, a numpy array or a tensor into a [N, 2] float64 tensor.
    '''
    X = torch.as_tensor(X, dtype=DTYPE)
    if X.ndim == 1:
        X = X.reshape(-1, 2)
    assert X.ndim == 2 and X.size(1) == 2, f"Expected points of shape [N, 2], got {tuple(X.shape)}"
    return X


def thin_plate(r, kp):
    # r^2 log r is taken at its limit 0 for r = 0, so k(0) = R^2
    r2 = r * r
    log_r = torch.log(torch.where(r > 0, r, torch.ones_like(r)))
    return 2.0 * r2 * log_r - (1.0 + 2.0 * math.log(kp.R)) * r2 + kp.R ** 2


def kernel_matrix(X1, X2, kp):
    """Thin-plate kernel between every pair of rows, shape [|X1|, |X2|]."""
    X1, X2 = as_points(X1), as_points(X2)
    if X1.size(0) == 0 or X2.size(0) == 0:
        return torch.zeros(X1.size(0), X2.size(0), dtype=DTYPE)

    # NOTE: the matmul shortcut of cdist breaks both r = 0 on the diagonal and exact symmetry
    r = torch.cdist(X1, X2, compute_mode='donot_use_mm_for_euclid_dist')
    return thin_plate(r, kp)


def kernel_eval(x1, x2, kp):
    return kernel_matrix(x1, x2, kp)[0, 0].item()
#!SECTION

# SECTION: Factorization with jitter
def jitter_cholesky(K, kp, what="kernel matrix"):
    '''
    Lower Cholesky factor of a symmetric matrix, retrying with growing diagonal jitter.
    Raises NumericalFailure naming `what` when every attempt fails.
    '''
    n = K.size(0)
    eye = torch.eye(n, dtype=DTYPE)
    for scale in JITTER_SCALES:
        L, info = torch.linalg.cholesky_ex(K + scale * kp.R ** 2 * eye)
        if info.item() == 0 and bool(torch.isfinite(L).all()):
            if scale > 0.0:
                rank_zero_warn(f"Factorization of {what} ({n}x{n}) needed jitter {scale:g}*R^2")
            return L
    raise NumericalFailure(f"Factorization of {what} ({n}x{n}) failed after jitter {JITTER_SCALES[-1]:g}*R^2")


def whiten(L, B):
    """Solves L X = B for lower-triangular L."""
    return torch.linalg.solve_triangular(L, B, upper=False)
#!SECTION

# SECTION: Exact GP regression (reference model)
def merge_duplicates(Xm, y):
    '''
    Collapses exactly repeated locations into one, averaging their targets.
    '''
    Xm, y = as_points(Xm), torch.as_tensor(y, dtype=DTYPE).reshape(-1)
    unique, inverse = torch.unique(Xm, dim=0, return_inverse=True)
    if unique.size(0) == Xm.size(0):
        return Xm, y
    sums = torch.zeros(unique.size(0), dtype=DTYPE).index_add_(0, inverse, y)
    counts = torch.zeros(unique.size(0), dtype=DTYPE).index_add_(0, inverse, torch.ones_like(y))
    return unique, sums / counts


def exact_gp_fit(Xm, y, noise, kp, name="batch"):
    '''
    Factorizes the exact GP system once.

    Returns:
        (merged training locations [M, 2], Cholesky factor of K_mm + sigma^2 I, weights [M])
    '''
    if as_points(Xm).size(0) == 0:
        raise PreconditionError("Exact GP regression needs at least one training point")
    Xm, y = merge_duplicates(Xm, y)
    K = kernel_matrix(Xm, Xm, kp) + noise.sigma2 * torch.eye(Xm.size(0), dtype=DTYPE)
    L = jitter_cholesky(K, kp, what=f"exact GP system of {name} ({Xm.size(0)} measurements)")
    alpha = torch.cholesky_solve(y.unsqueeze(1), L).squeeze(1)
    return Xm, L, alpha


def exact_gp_predict(Xm, y, noise, kp, Xs, full_cov=True, name="batch"):
    '''
    Posterior of exact GP regression with the thin-plate kernel.

    Args:
        Xm: training locations [M, 2]
        y: training targets [M]
        noise: NoiseParams
        kp: KernelParams
        Xs: trial locations [S, 2]
        full_cov: return the [S, S] covariance if True, else only its diagonal
        name: label used in the error message when the system cannot be factorized

    Returns:
        (mean [S], covariance [S, S] or variance [S])
    '''
    Xm, L, alpha = exact_gp_fit(Xm, y, noise, kp, name=name)
    Xs = as_points(Xs)

    Kms = kernel_matrix(Xm, Xs, kp)
    mean = Kms.T @ alpha

    V = whiten(L, Kms)
    if full_cov:
        cov = kernel_matrix(Xs, Xs, kp) - V.T @ V
        return mean, 0.5 * (cov + cov.T)
    var = kp.R ** 2 - torch.sum(V * V, dim=0)
    return mean, var
#!SECTION
