"""Feature-dimension alignment by truncated SVD, plus domain feature tokens.

``fit_dal`` maps every domain's raw features to a common width. Feature tokens
are one learnable vector per source domain that rescales the aligned features
column-wise; downstream, ``FeatureAdapter`` learns a mixture of the frozen
source tokens plus a free offset vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_DIM = 50


def fit_dal(X: np.ndarray, target_dim: int = DEFAULT_DIM, rank_tol: float | None = None) -> np.ndarray:
    """Project ``X`` onto its top singular directions: ``U_k S_k`` zero-padded to ``target_dim``.

    Features are not centred. Each left singular vector is sign-fixed so its
    largest-magnitude entry is non-negative.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"fit_dal needs a non-empty 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("fit_dal: non-finite input values")
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    if rank_tol is None:
        rank_tol = max(X.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > rank_tol))
    k = min(target_dim, rank)
    U = U[:, :k]
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[idx, np.arange(k)] < 0, -1.0, 1.0)
    out = np.zeros((X.shape[0], target_dim))
    out[:, :k] = U * signs * s[:k]
    return out


def dal_cache_key(dataset_hash: str, target_dim: int) -> str:
    return f"{dataset_hash}-d{target_dim}"


def cached_fit_dal(X: np.ndarray, target_dim: int, cache_dir: str | Path | None, dataset_hash: str) -> np.ndarray:
    """``fit_dal`` memoised on disk as a tensor file keyed by (dataset hash, width)."""
    if cache_dir is None:
        return fit_dal(X, target_dim)
    cache_dir = Path(cache_dir)
    key = dal_cache_key(dataset_hash, target_dim)
    path = cache_dir / key
    if (path / "manifest.json").exists():
        arrays, _ = T.load_tensors(path)
        return arrays["aligned"]
    out = fit_dal(X, target_dim)
    T.save_tensors(path, {"aligned": out}, extra={"cache_key": key, "target_dim": target_dim})
    return out


@dataclass
class FeatureTokens:
    """One learnable 1×d token per source domain (the Psi parameters)."""

    tokens: list[Tensor]

    @classmethod
    def init(cls, num_domains: int, dim: int) -> "FeatureTokens":
        return cls([Tensor(np.ones((1, dim)), requires_grad=True) for _ in range(num_domains)])

    @property
    def num_domains(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.tokens[0].shape[1]

    def stacked(self) -> np.ndarray:
        return np.concatenate([t.data for t in self.tokens], axis=0)

    def parameters(self) -> list[Tensor]:
        return [t for t in self.tokens if t.requires_grad]


@dataclass
class FeatureAdapter:
    """Downstream feature adaptation (the Gamma parameters).

    Effective token = mixture @ stacked_source_tokens + offset.
    """

    mixture: Tensor  # 1×K
    offset: Tensor  # 1×d

    @classmethod
    def init(cls, num_domains: int, dim: int) -> "FeatureAdapter":
        return cls(Tensor(np.full((1, num_domains), 1.0 / num_domains), requires_grad=True),
                   Tensor(np.zeros((1, dim)), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return [self.mixture, self.offset]

    def effective_token(self, frozen_tokens: FeatureTokens) -> Tensor:
        K, d = frozen_tokens.num_domains, frozen_tokens.dim
        if self.mixture.shape != (1, K) or self.offset.shape != (1, d):
            raise T.ShapeError(f"adapter shapes {self.mixture.shape}/{self.offset.shape} "
                               f"do not match K={K}, d={d}")
        bank = Tensor(frozen_tokens.stacked())  # constant: no gradient to source tokens
        return T.add(T.matmul(self.mixture, bank), self.offset)


def apply_fal(domain_index: int, X: Tensor | np.ndarray, tokens: FeatureTokens) -> Tensor:
    if not 0 <= domain_index < tokens.num_domains:
        raise IndexError(f"domain index {domain_index} out of range for {tokens.num_domains} domains")
    X = X if isinstance(X, Tensor) else Tensor(X)
    token = tokens.tokens[domain_index]
    if X.shape[1] != token.shape[1]:
        raise T.ShapeError(f"features have width {X.shape[1]}, token has {token.shape[1]}")
    return T.mul(X, token)


def apply_fad(X: Tensor | np.ndarray, adapter: FeatureAdapter, frozen_tokens: FeatureTokens) -> Tensor:
    X = X if isinstance(X, Tensor) else Tensor(X)
    token = adapter.effective_token(frozen_tokens)
    if X.shape[1] != token.shape[1]:
        raise T.ShapeError(f"features have width {X.shape[1]}, token has {token.shape[1]}")
    return T.mul(X, token)
