"""High-dimensional Gaussian filtering: v_i = sum_j exp(-|f_i - f_j|^2 / 2) v_j.

Two backends behind one interface: an exact Gram-matrix evaluation for
instances up to EXACT_LIMIT points, and a permutohedral-lattice
approximation (splat / blur / slice) that scales linearly for full-size
images where the quadratic sum is infeasible.
"""

from __future__ import annotations

import numpy as np

EXACT_LIMIT = 4096


class FilterError(ValueError):
    pass


def _as_features(features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise FilterError("features must be (N, d)")
    if not np.isfinite(f).all():
        raise FilterError("features must be finite")
    return f


class ExactGaussianFilter:
    """Dense pairwise kernel; O(N^2) memory and time."""

    def __init__(self, features: np.ndarray):
        f = _as_features(features)
        sq = (f * f).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
        np.maximum(d2, 0.0, out=d2)
        self.gram = np.exp(-0.5 * d2)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.gram @ np.asarray(values, dtype=np.float64)


class PermutohedralFilter:
    """Lattice approximation of the Gaussian filter.

    The splat/blur/slice plan is built once per feature set; apply() then
    costs a scatter-add, d+1 three-point convolutions over lattice points,
    and a gather per value column.
    """

    def __init__(self, features: np.ndarray):
        f = _as_features(features)
        n, d = f.shape
        if d < 1:
            raise FilterError("need at least one feature dimension")
        self.n, self.d = n, d

        # scale so the lattice blur matches a unit-variance Gaussian
        inv_std = np.sqrt(2.0 / 3.0) * (d + 1)
        scale = inv_std / np.sqrt((np.arange(d) + 1.0) * (np.arange(d) + 2.0))
        cf = f * scale

        # embed into the hyperplane sum(x) = 0 in R^{d+1}
        elevated = np.empty((n, d + 1))
        sm = np.zeros(n)
        for j in range(d, 0, -1):
            cfj = cf[:, j - 1]
            elevated[:, j] = sm - j * cfj
            sm = sm + cfj
        elevated[:, 0] = sm

        # closest remainder-0 lattice point (coordinates are multiples of d+1)
        v = elevated / (d + 1)
        up = np.ceil(v) * (d + 1)
        down = np.floor(v) * (d + 1)
        rem0 = np.where(up - elevated < elevated - down, up, down)
        rem_sum = np.rint(rem0.sum(axis=1) / (d + 1)).astype(np.int64)

        # rank of each coordinate within the simplex
        diff = elevated - rem0
        rank = np.zeros((n, d + 1), dtype=np.int64)
        for i in range(d):
            for j in range(i + 1, d + 1):
                smaller = diff[:, i] < diff[:, j]
                rank[:, i] += smaller
                rank[:, j] += ~smaller
        rank += rem_sum[:, None]
        rem0 = rem0.astype(np.int64)
        low = rank < 0
        rank[low] += d + 1
        rem0[low] += d + 1
        high = rank > d
        high &= ~low
        rank[high] -= d + 1
        rem0[high] -= d + 1

        # barycentric weights within the enclosing simplex
        bary = np.zeros((n, d + 2))
        vv = (elevated - rem0) / (d + 1)
        rows = np.arange(n)
        for i in range(d + 1):
            idx = d - rank[:, i]
            bary[rows, idx] += vv[:, i]
            bary[rows, idx + 1] -= vv[:, i]
        bary[:, 0] += 1.0 + bary[:, d + 1]
        self.barycentric = bary[:, : d + 1]  # (N, d+1)

        canonical = np.zeros((d + 1, d + 1), dtype=np.int64)
        for r in range(d + 1):
            canonical[r, : d + 1 - r] = r
            canonical[r, d + 1 - r :] = r - (d + 1)

        # first d coordinates identify a lattice point (the last is implied)
        corner_keys = np.empty((d + 1, n, d), dtype=np.int64)
        for r in range(d + 1):
            corner_keys[r] = rem0[:, :d] + canonical[r][rank[:, :d]]
        keys = corner_keys.reshape((d + 1) * n, d)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        self.m = uniq.shape[0]
        self.splat_idx = inverse.reshape(d + 1, n)  # lattice point per corner

        # neighbor indices along each lattice direction for the blur
        code, codes_of = self._key_codes(uniq)
        self.blur_neighbors = np.empty((d + 1, 2, self.m), dtype=np.int64)
        for j in range(d + 1):
            offset = np.ones(d, dtype=np.int64)
            if j < d:
                offset[j] = -d
            self.blur_neighbors[j, 0] = codes_of(uniq + offset)
            self.blur_neighbors[j, 1] = codes_of(uniq - offset)

    @staticmethod
    def _key_codes(uniq: np.ndarray):
        """Pack integer key rows into sortable int64 codes for lookup."""
        d = uniq.shape[1]
        lo = uniq.min(axis=0) - (d + 2)
        hi = uniq.max(axis=0) + (d + 2)
        spans = (hi - lo + 1).astype(object)
        total = 1
        for s in spans:
            total *= int(s)
        if total >= 2**62:
            raise FilterError("lattice key range too large to pack")
        strides = np.ones(d, dtype=np.int64)
        for i in range(d - 2, -1, -1):
            strides[i] = strides[i + 1] * int(spans[i + 1])

        def encode(keys: np.ndarray) -> np.ndarray:
            return ((keys - lo) * strides).sum(axis=1)

        codes = encode(uniq)
        order = np.argsort(codes)
        sorted_codes = codes[order]

        missing = len(sorted_codes)

        def lookup(keys: np.ndarray) -> np.ndarray:
            q = encode(keys)
            pos = np.searchsorted(sorted_codes, q)
            pos = np.clip(pos, 0, len(sorted_codes) - 1)
            found = sorted_codes[pos] == q
            return np.where(found, order[pos], missing)

        return codes, lookup

    def apply(self, values: np.ndarray) -> np.ndarray:
        vals = np.asarray(values, dtype=np.float64)
        squeeze = vals.ndim == 1
        if squeeze:
            vals = vals[:, None]
        if vals.shape[0] != self.n:
            raise FilterError(f"values must have {self.n} rows")
        d = self.d
        cols = vals.shape[1]

        # splat: slot m stays zero for missing blur neighbors
        flat_idx = self.splat_idx.reshape(-1)
        flat_w = self.barycentric.T.reshape(-1)
        lattice = np.zeros((self.m + 1, cols))
        for c in range(cols):
            lattice[:, c] = np.bincount(
                flat_idx, weights=flat_w * np.tile(vals[:, c], d + 1), minlength=self.m + 1
            )

        for j in range(d + 1):
            n1 = self.blur_neighbors[j, 0]
            n2 = self.blur_neighbors[j, 1]
            # the gather on the right runs before the add, so each pass
            # reads the previous pass's values only
            lattice[: self.m] += 0.5 * (lattice[n1] + lattice[n2])

        alpha = 1.0 / (1.0 + 2.0 ** -float(d))
        out = np.zeros((self.n, cols))
        for r in range(d + 1):
            out += self.barycentric[:, r : r + 1] * lattice[self.splat_idx[r]]
        out *= alpha
        return out[:, 0] if squeeze else out


class GaussianFilterBank:
    """Size-dispatched filter: exact up to EXACT_LIMIT points, lattice beyond."""

    def __init__(self, features: np.ndarray, force_lattice: bool = False):
        f = _as_features(features)
        if not force_lattice and f.shape[0] <= EXACT_LIMIT:
            self._impl = ExactGaussianFilter(f)
            self.exact = True
        else:
            self._impl = PermutohedralFilter(f)
            self.exact = False

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self._impl.apply(values)


def gaussian_filter_bank(features: np.ndarray, values: np.ndarray) -> np.ndarray:
    """One-shot filtering convenience wrapper."""
    return GaussianFilterBank(features).apply(values)
