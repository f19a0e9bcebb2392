"""Subject ingestion, stratum aggregation and the sum-to-zero design encoding."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError

__all__ = [
    "ColumnConfig",
    "CovariateSpec",
    "SubjectTable",
    "GroupedDataset",
    "ParameterIndex",
    "DesignEncoding",
    "ingest_subjects",
    "spec_from_table",
    "group_subjects",
    "build_design",
    "model_dimensions",
    "read_grouped_csv",
]

_DEFAULT_ARM_LABELS = {"1": 1, "0": 0, "Treatment": 1, "Comparator": 0}


@dataclass(frozen=True)
class ColumnConfig:
    """Which columns of the subject file hold what.

    ``arm_map`` takes precedence over ``treatment_label``; with neither, the
    arm column must contain 0/1 or Treatment/Comparator.
    """

    arm: str
    covariates: Sequence[str]
    issues: Sequence[str]
    arm_map: Mapping[str, int] | None = None
    treatment_label: str | None = None
    id_column: str | None = None
    category_order: Mapping[str, Sequence[str]] | None = None

    def arm_value(self, label: str) -> int | None:
        if self.arm_map is not None:
            v = self.arm_map.get(label)
            return None if v is None else int(v)
        if self.treatment_label is not None:
            if label == "":
                return None
            return 1 if label == self.treatment_label else 0
        return _DEFAULT_ARM_LABELS.get(label)


@dataclass(frozen=True)
class CovariateSpec:
    covariates: tuple[tuple[str, tuple[str, ...]], ...]
    issues: tuple[str, ...]

    def __post_init__(self):
        for name, cats in self.covariates:
            if len(cats) < 2:
                raise ParseError(f"covariate {name!r} has {len(cats)} category; at least 2 are required")
            if len(set(cats)) != len(cats):
                raise ParseError(f"covariate {name!r} has duplicate category labels")
        if len(self.covariates) == 0:
            raise ParseError("at least one covariate is required")
        if len(self.issues) == 0:
            raise ParseError("at least one issue is required")

    @classmethod
    def from_lists(cls, covariates: Mapping[str, Sequence[str]] | Sequence, issues: Sequence[str]):
        items = covariates.items() if isinstance(covariates, Mapping) else covariates
        return cls(tuple((str(n), tuple(str(c) for c in cats)) for n, cats in items), tuple(issues))

    @property
    def J(self) -> int:
        return len(self.covariates)

    @property
    def K(self) -> int:
        return len(self.issues)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for _, c in self.covariates)

    @property
    def G(self) -> int:
        return sum(self.sizes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.covariates)

    @property
    def offsets(self) -> tuple[int, ...]:
        """First dummy column of each covariate block."""
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    def blocks(self) -> list[np.ndarray]:
        return [np.arange(o, o + s) for o, s in zip(self.offsets, self.sizes)]

    def subgroup_labels(self) -> list[str]:
        return [f"{name}:{cat}" for name, cats in self.covariates for cat in cats]


@dataclass
class SubjectTable:
    subject_ids: list[str]
    arm: np.ndarray  # (n,) int {0,1}
    covariates: np.ndarray  # (n, J) object array of labels
    issues: np.ndarray  # (n, K) int {0,1}
    covariate_names: tuple[str, ...]
    issue_names: tuple[str, ...]

    def __post_init__(self):
        self.arm = np.asarray(self.arm, dtype=np.int64)
        self.issues = np.asarray(self.issues, dtype=np.int64).reshape(len(self.arm), -1)
        self.covariates = np.asarray(self.covariates, dtype=object).reshape(len(self.arm), -1)
        if self.covariates.shape[1] != len(self.covariate_names):
            raise ParseError("covariate arity does not match covariate names")
        if self.issues.shape[1] != len(self.issue_names):
            raise ParseError("issue arity does not match issue names")
        if not np.isin(self.arm, (0, 1)).all() or not np.isin(self.issues, (0, 1)).all():
            raise ParseError("arm and issue indicators must be 0/1")

    def __len__(self):
        return len(self.arm)

    @property
    def J(self):
        return self.covariates.shape[1]

    @property
    def K(self):
        return self.issues.shape[1]


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise ParseError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = [(reader.line_num, r) for r in reader if any(cell.strip() for cell in r)]
    return [h.strip() for h in header], rows


def ingest_subjects(path, config: ColumnConfig) -> SubjectTable:
    """Read a subject-level CSV into a :class:`SubjectTable`.

    Every problem raises :class:`ParseError`; nothing is imputed.
    """
    header, rows = _read_rows(path)
    col = {name: i for i, name in enumerate(header)}
    wanted = [config.arm, *config.covariates, *config.issues]
    if config.id_column:
        wanted.append(config.id_column)
    for name in wanted:
        if name not in col:
            raise ParseError(f"missing column {name!r} in {path}")

    ids, arm, covs, issues = [], [], [], []
    for lineno, r in rows:
        if len(r) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(r)}")
        a = config.arm_value(r[col[config.arm]].strip())
        if a is None:
            raise ParseError(f"line {lineno}: unrecognised arm label {r[col[config.arm]]!r}")
        c = [r[col[name]] for name in config.covariates]
        for name, v in zip(config.covariates, c):
            if v == "":
                raise ParseError(f"line {lineno}: missing value for covariate {name!r}")
        y = []
        for name in config.issues:
            cell = r[col[name]].strip()
            if cell not in ("0", "1"):
                raise ParseError(f"line {lineno}: issue {name!r} must be 0 or 1, got {cell!r}")
            y.append(int(cell))
        ids.append(r[col[config.id_column]] if config.id_column else str(len(ids) + 1))
        arm.append(a)
        covs.append(c)
        issues.append(y)

    J, K = len(config.covariates), len(config.issues)
    return SubjectTable(
        subject_ids=ids,
        arm=np.array(arm, dtype=np.int64),
        covariates=np.array(covs, dtype=object).reshape(len(ids), J),
        issues=np.array(issues, dtype=np.int64).reshape(len(ids), K),
        covariate_names=tuple(config.covariates),
        issue_names=tuple(config.issues),
    )


def spec_from_table(table: SubjectTable, order: Mapping[str, Sequence[str]] | None = None) -> CovariateSpec:
    """Discover categories in file order unless ``order`` fixes them."""
    covs = []
    for j, name in enumerate(table.covariate_names):
        if order and name in order:
            cats = tuple(order[name])
        else:
            cats = tuple(dict.fromkeys(table.covariates[:, j].tolist()))
        covs.append((name, cats))
    return CovariateSpec(tuple(covs), tuple(table.issue_names))


@dataclass
class GroupedDataset:
    """Subjects collapsed to covariate-by-arm strata.

    ``levels[i, j]`` is the category index of covariate ``j`` in stratum ``i``.
    """

    levels: np.ndarray  # (m, J) int
    treat: np.ndarray  # (m,) int
    n: np.ndarray  # (m,) int
    N: np.ndarray  # (m, K) int
    spec: CovariateSpec
    _X: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64).reshape(-1, self.spec.J)
        m = self.levels.shape[0]
        self.treat = np.asarray(self.treat, dtype=np.int64).reshape(m)
        self.n = np.asarray(self.n, dtype=np.int64).reshape(m)
        self.N = np.asarray(self.N, dtype=np.int64).reshape(m, self.spec.K)
        if (self.n < 1).any():
            raise ParseError("every stratum needs at least one subject")
        if (self.N < 0).any() or (self.N > self.n[:, None]).any():
            raise ParseError("event counts must lie in [0, n_i]")
        if not np.isin(self.treat, (0, 1)).all():
            raise ParseError("treatment indicator must be 0/1")
        for j, size in enumerate(self.spec.sizes):
            if m and (self.levels[:, j].min() < 0 or self.levels[:, j].max() >= size):
                raise ParseError(f"category index out of range for covariate {self.spec.names[j]!r}")
        keys = {(tuple(l), t) for l, t in zip(self.levels.tolist(), self.treat.tolist())}
        if len(keys) != m:
            raise ParseError("duplicate stratum keys")

    @property
    def m(self) -> int:
        return self.levels.shape[0]

    @property
    def X(self) -> np.ndarray:
        """(m, G) one-hot dummy matrix."""
        if self._X is None:
            X = np.zeros((self.m, self.spec.G))
            for j, off in enumerate(self.spec.offsets):
                X[np.arange(self.m), off + self.levels[:, j]] = 1.0
            self._X = X
        return self._X

    def totals(self) -> tuple[int, np.ndarray]:
        return int(self.n.sum()), self.N.sum(axis=0)

    def with_counts(self, N) -> "GroupedDataset":
        return GroupedDataset(self.levels, self.treat, self.n, N, self.spec)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.spec.covariates, self.spec.issues)).encode())
        for a in (self.levels, self.treat, self.n, self.N):
            h.update(np.ascontiguousarray(a, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    def expand(self) -> SubjectTable:
        """Inverse of grouping: one row per subject."""
        arm, covs, issues = [], [], []
        labels = [cats for _, cats in self.spec.covariates]
        for i in range(self.m):
            lab = [labels[j][self.levels[i, j]] for j in range(self.spec.J)]
            for s in range(self.n[i]):
                arm.append(self.treat[i])
                covs.append(lab)
                issues.append([1 if s < self.N[i, k] else 0 for k in range(self.spec.K)])
        nrow = len(arm)
        return SubjectTable(
            [str(i + 1) for i in range(nrow)],
            np.array(arm, dtype=np.int64),
            np.array(covs, dtype=object).reshape(nrow, self.spec.J),
            np.array(issues, dtype=np.int64).reshape(nrow, self.spec.K),
            self.spec.names,
            self.spec.issues,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*self.spec.names, "arm", "n", *self.spec.issues])
            labels = [cats for _, cats in self.spec.covariates]
            for i in range(self.m):
                w.writerow([
                    *(labels[j][self.levels[i, j]] for j in range(self.spec.J)),
                    int(self.treat[i]),
                    int(self.n[i]),
                    *(int(x) for x in self.N[i]),
                ])


def group_subjects(table: SubjectTable, spec: CovariateSpec) -> GroupedDataset:
    if tuple(table.covariate_names) != spec.names:
        raise ParseError("table covariates do not match the covariate spec")
    if tuple(table.issue_names) != spec.issues:
        raise ParseError("table issues do not match the covariate spec")
    lookup = [{c: i for i, c in enumerate(cats)} for _, cats in spec.covariates]
    idx = np.empty((len(table), spec.J), dtype=np.int64)
    for j, name in enumerate(spec.names):
        for r, label in enumerate(table.covariates[:, j]):
            try:
                idx[r, j] = lookup[j][label]
            except KeyError:
                raise ParseError(f"label {label!r} of covariate {name!r} is not among its declared levels") from None

    keys = np.column_stack([idx, table.arm]) if len(table) else np.empty((0, spec.J + 1), dtype=np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = uniq.shape[0]
    n = np.bincount(inverse, minlength=m)
    N = np.zeros((m, spec.K), dtype=np.int64)
    np.add.at(N, inverse, table.issues)
    return GroupedDataset(uniq[:, : spec.J], uniq[:, spec.J], n, N, spec)


def read_grouped_csv(path, covariates: Sequence[str], issues: Sequence[str],
                     order: Mapping[str, Sequence[str]] | None = None) -> GroupedDataset:
    """Read the one-row-per-stratum format written by :meth:`GroupedDataset.to_csv`."""
    header, rows = _read_rows(path)
    col = {h: i for i, h in enumerate(header)}
    for name in [*covariates, "arm", "n", *issues]:
        if name not in col:
            raise ParseError(f"missing column {name!r} in {path}")
    cats = {c: list(order[c]) if order and c in order else [] for c in covariates}
    parsed = []
    for lineno, r in rows:
        try:
            labs = [r[col[c]] for c in covariates]
            arm, n = int(r[col["arm"]]), int(r[col["n"]])
            N = [int(r[col[k]]) for k in issues]
        except (ValueError, IndexError):
            raise ParseError(f"line {lineno}: malformed stratum row") from None
        for c, lab in zip(covariates, labs):
            if lab not in cats[c]:
                if order and c in order:
                    raise ParseError(f"line {lineno}: label {lab!r} of covariate {c!r} is not among its declared levels")
                cats[c].append(lab)
        parsed.append((labs, arm, n, N))
    spec = CovariateSpec.from_lists([(c, cats[c]) for c in covariates], issues)
    levels = np.array([[cats[c].index(l) for c, l in zip(covariates, labs)] for labs, *_ in parsed],
                      dtype=np.int64).reshape(-1, spec.J)
    treat = np.array([p[1] for p in parsed], dtype=np.int64)
    # same stratum order as group_subjects, so both input formats give identical fits
    order_ = np.lexsort((treat, *levels.T[::-1]))
    return GroupedDataset(
        levels[order_],
        treat[order_],
        np.array([p[2] for p in parsed], dtype=np.int64)[order_],
        np.array([p[3] for p in parsed], dtype=np.int64).reshape(-1, spec.K)[order_],
        spec,
    )


# ---------------------------------------------------------------------------
# parameter layout and constraint transform
# ---------------------------------------------------------------------------

KINDS = ("A", "B0", "B", "alpha0", "alpha", "beta0", "beta")


class ParameterIndex:
    """Slot map for the full parameter vector.

    Order: A_1..A_G, B_0, B_1..B_G, then for each issue k:
    alpha_0k, alpha_1k..alpha_Gk, beta_0k, beta_1k..beta_Gk.
    """

    def __init__(self, spec: CovariateSpec):
        G, K = spec.G, spec.K
        self.G, self.K, self.J = G, K, spec.J
        self.A = np.arange(G)
        self.B0 = G
        self.B = np.arange(G + 1, 2 * G + 1)
        self.width = 2 * G + 2  # per-issue block
        base = 2 * G + 1 + self.width * np.arange(K)
        self.issue_start = base
        self.alpha0 = base.copy()
        self.alpha = (base[None, :] + 1 + np.arange(G)[:, None])  # (G, K)
        self.beta0 = base + G + 1
        self.beta = (base[None, :] + G + 2 + np.arange(G)[:, None])  # (G, K)
        self.M = 2 * (G + 1) * (K + 1) - 1

        kind = np.empty(self.M, dtype=object)
        g = np.full(self.M, -1)
        k = np.full(self.M, -1)
        kind[self.A], g[self.A] = "A", np.arange(G)
        kind[self.B0] = "B0"
        kind[self.B], g[self.B] = "B", np.arange(G)
        for kk in range(K):
            kind[self.alpha0[kk]], k[self.alpha0[kk]] = "alpha0", kk
            kind[self.beta0[kk]], k[self.beta0[kk]] = "beta0", kk
            kind[self.alpha[:, kk]], g[self.alpha[:, kk]], k[self.alpha[:, kk]] = "alpha", np.arange(G), kk
            kind[self.beta[:, kk]], g[self.beta[:, kk]], k[self.beta[:, kk]] = "beta", np.arange(G), kk
        self.kind, self.g, self.k = kind, g, k
        self.labels = spec.subgroup_labels()
        self.issues = spec.issues

    def term_type(self, slot: int) -> str:
        return {"A": "COV", "alpha": "COV", "B0": "TREAT", "beta0": "TREAT",
                "B": "TRT*COV", "beta": "TRT*COV", "alpha0": "INTERCEPT"}[self.kind[slot]]

    def term(self, slot: int) -> str:
        kind, g = self.kind[slot], self.g[slot]
        if kind in ("A", "alpha"):
            return self.labels[g]
        if kind in ("B", "beta"):
            return f"Trt*{self.labels[g]}"
        if kind in ("B0", "beta0"):
            return "Treatment"
        return "Intercept"

    def issue(self, slot: int) -> str:
        k = self.k[slot]
        return "PRIOR_MEAN" if k < 0 else self.issues[k]

    def constraint_blocks(self, spec: CovariateSpec) -> list[np.ndarray]:
        """Every index set whose entries must sum to zero."""
        out = []
        for blk in spec.blocks():
            out.append(self.A[blk])
            out.append(self.B[blk])
            for kk in range(self.K):
                out.append(self.alpha[blk, kk])
                out.append(self.beta[blk, kk])
        return out


def _sum_to_zero_map(spec: CovariateSpec) -> np.ndarray:
    """G x (G - J) map; the last category of each covariate is minus the sum of the others."""
    G, J = spec.G, spec.J
    Zx = np.zeros((G, G - J))
    col = 0
    for off, size in zip(spec.offsets, spec.sizes):
        for c in range(size - 1):
            Zx[off + c, col + c] = 1.0
            Zx[off + size - 1, col + c] = -1.0
        col += size - 1
    return Zx


@dataclass
class DesignEncoding:
    spec: CovariateSpec
    index: ParameterIndex
    Zx: np.ndarray  # (G, G-J)
    Z: np.ndarray  # (M, M*)
    global_Z: np.ndarray  # (2G+1, 2(G-J)+1) for (A, B0, B)
    issue_Z: np.ndarray  # (2G+2, 2(G-J)+2) for one issue block
    X: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def Mstar(self) -> int:
        return self.Z.shape[1]

    @property
    def constraint_map(self) -> list[np.ndarray]:
        return self.spec.blocks()

    @property
    def kept(self) -> np.ndarray:
        """Full-vector slots that survive into the reduced vector, in reduced order."""
        return np.array([int(np.flatnonzero(self.Z[:, c] == 1.0)[0]) for c in range(self.Mstar)])

    def reduce(self, theta: np.ndarray) -> np.ndarray:
        """Reduced coordinates of a constraint-satisfying full vector."""
        return np.asarray(theta)[self.kept]


def _blockdiag(*mats):
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r : r + m.shape[0], c : c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def build_design(spec: CovariateSpec, data: GroupedDataset | None = None) -> DesignEncoding:
    Zx = _sum_to_zero_map(spec)
    one = np.ones((1, 1))
    gZ = _blockdiag(Zx, one, Zx)
    iZ = _blockdiag(one, Zx, one, Zx)
    Z = _blockdiag(gZ, *([iZ] * spec.K))
    return DesignEncoding(spec, ParameterIndex(spec), Zx, Z, gZ, iZ,
                          None if data is None else data.X)


def model_dimensions(spec: CovariateSpec) -> tuple[int, int, ParameterIndex]:
    G, J, K = spec.G, spec.J, spec.K
    return 2 * (G + 1) * (K + 1) - 1, 2 * (G - J + 1) * (K + 1) - 1, ParameterIndex(spec)
