"""Contact-map I/O and the preprocessing pipeline: balancing, read downsampling,
value normalization, 40x40 patch tiling, chromosome splits and a synthetic
contact-map generator."""

from dataclasses import dataclass, field
import logging
import os
import re
import tempfile

import numpy as np

from .errors import ConvergenceError, DomainError, FormatError, ScaleError

log = logging.getLogger(__name__)

PATCH_SIZE = 40
SYMMETRY_TOL = 1e-6
VALIDATION_CHROMS = (2, 6, 10, 12)
TEST_CHROMS = (4, 14, 16, 20)


@dataclass
class ContactMap:
    counts: np.ndarray
    bin_size: int = 10_000
    chrom: str = ""

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DomainError(f"contact map must be square, got shape {counts.shape}")
        if not np.all(np.isfinite(counts)):
            raise DomainError("contact map has non-finite entries")
        if np.any(counts < 0):
            raise DomainError("contact map has negative entries")
        if not np.allclose(counts, counts.T, rtol=0, atol=SYMMETRY_TOL):
            raise DomainError("contact map is not symmetric")
        self.counts = counts

    @property
    def n(self):
        return self.counts.shape[0]

    def with_counts(self, counts):
        return ContactMap(counts, self.bin_size, self.chrom)


# ---------------------------------------------------------------------------
# I/O


def _chrom_from_name(path):
    m = re.search(r"(chr[0-9A-Za-z]+)", os.path.basename(str(path)))
    return m.group(1) if m else ""


def _data_lines(text):
    """Yield ``(line_number, tokens)`` for non-blank, non-comment lines."""
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield number, stripped.split()


def _header_chrom(text):
    for line in text.splitlines():
        m = re.match(r"#\s*chrom\s*=\s*(\S+)", line.strip())
        if m:
            return m.group(1)
    return ""


def sniff_format(text):
    """``"coo"`` if the first data line is a two-field header followed only by
    three-field triples, ``"dense"`` otherwise."""
    lines = list(_data_lines(text))
    if not lines:
        raise FormatError("empty map file")
    if len(lines[0][1]) == 2 and all(len(tok) == 3 for _, tok in lines[1:]):
        return "coo"
    return "dense"


def _parse_float(token, line):
    try:
        value = float(token)
    except ValueError:
        raise FormatError(f"not a number: {token!r}", line) from None
    if not np.isfinite(value):
        raise FormatError(f"non-finite value {token!r}", line)
    if value < 0:
        raise FormatError(f"negative count {token!r}", line)
    return value


def _parse_index(token, n, line):
    try:
        value = int(token)
    except ValueError:
        raise FormatError(f"not an integer index: {token!r}", line) from None
    if not 0 <= value < n:
        raise FormatError(f"index {value} outside 0..{n - 1}", line)
    return value


def parse_map(text, fmt=None, chrom=""):
    fmt = fmt or sniff_format(text)
    chrom = chrom or _header_chrom(text)
    lines = list(_data_lines(text))
    if not lines:
        raise FormatError("empty map file")
    if fmt == "coo":
        (hline, header), body = lines[0], lines[1:]
        if len(header) != 2:
            raise FormatError("COO header must be 'n bin_size'", hline)
        try:
            n, bin_size = int(header[0]), int(header[1])
        except ValueError:
            raise FormatError("COO header must hold two integers", hline) from None
        if n < 1:
            raise FormatError(f"bin count must be positive, got {n}", hline)
        counts = np.zeros((n, n))
        for number, tok in body:
            if len(tok) != 3:
                raise FormatError(f"expected 'i j count', got {len(tok)} fields", number)
            i, j = _parse_index(tok[0], n, number), _parse_index(tok[1], n, number)
            value = _parse_float(tok[2], number)
            counts[i, j] = value
            counts[j, i] = value
        return ContactMap(counts, bin_size, chrom)
    if fmt == "dense":
        n = len(lines[0][1])
        if len(lines) != n:
            raise FormatError(f"dense map has {len(lines)} rows but {n} columns", lines[-1][0])
        rows = []
        for number, tok in lines:
            if len(tok) != n:
                raise FormatError(f"expected {n} values, got {len(tok)}", number)
            rows.append([_parse_float(t, number) for t in tok])
        counts = np.array(rows)
        bad = np.argwhere(np.abs(counts - counts.T) > SYMMETRY_TOL)
        if len(bad):
            i, j = bad[0]
            raise FormatError(f"asymmetric entries at ({i}, {j}): {counts[i, j]} vs {counts[j, i]}", lines[int(i)][0])
        return ContactMap(counts, 10_000, chrom)
    raise DomainError(f"unknown map format {fmt!r}")


def load_map(path, fmt=None, chrom=None):
    """Read a dense or COO text map; the format is sniffed when not given."""
    with open(path) as fh:
        text = fh.read()
    return parse_map(text, fmt, chrom or _chrom_from_name(path))


def _fmt_value(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def format_map(cmap, fmt="coo"):
    lines = []
    if cmap.chrom:
        lines.append(f"# chrom={cmap.chrom}")
    if fmt == "coo":
        lines.append(f"{cmap.n} {cmap.bin_size}")
        iu, ju = np.nonzero(np.triu(cmap.counts))
        lines.extend(f"{i} {j} {_fmt_value(cmap.counts[i, j])}" for i, j in zip(iu, ju))
    elif fmt == "dense":
        lines.extend(" ".join(_fmt_value(v) for v in row) for row in cmap.counts)
    else:
        raise DomainError(f"unknown map format {fmt!r}")
    return "\n".join(lines) + "\n"


def write_text_atomic(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_map(cmap, path, fmt=None):
    if fmt is None:
        fmt = "dense" if str(path).endswith((".txt", ".dense")) else "coo"
    write_text_atomic(path, format_map(cmap, fmt))


# ---------------------------------------------------------------------------
# Balancing, downsampling, normalization


def balance(cmap, tol=1e-6, max_iter=1000):
    """Symmetric iterative scaling until all non-empty rows share one sum.

    The map is rescaled as ``diag(b) M diag(b)``; rows that are entirely zero
    are left untouched. The common row sum is the mean row sum of the input,
    so the total number of contacts is preserved.
    """
    m = cmap.counts
    mask = m.sum(axis=1) > 0
    if not mask.any():
        return cmap.with_counts(m.copy())
    sub = m[np.ix_(mask, mask)]
    target = sub.sum() / mask.sum()
    bias = np.ones(mask.sum())
    residual = np.inf
    for _ in range(max_iter):
        rows = bias * (sub @ bias)
        residual = np.max(np.abs(rows / target - 1.0))
        if residual < tol:
            break
        bias *= np.sqrt(target / rows)
    else:
        rows = bias * (sub @ bias)
        residual = np.max(np.abs(rows / target - 1.0))
        if residual >= tol:
            raise ConvergenceError(f"balancing did not converge in {max_iter} iterations", residual)
    out = np.zeros_like(m)
    balanced = sub * bias[:, None] * bias[None, :]
    out[np.ix_(mask, mask)] = (balanced + balanced.T) / 2
    return cmap.with_counts(out)


def downsample_reads(cmap, ratio=1 / 16, seed=0):
    """Binomial thinning of every upper-triangle count (rounded half-to-even)."""
    if not 0 < ratio <= 1:
        raise DomainError(f"downsampling ratio must be in (0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    counts = np.rint(cmap.counts).astype(np.int64)
    iu = np.triu_indices(cmap.n)
    thinned = rng.binomial(counts[iu], ratio)
    out = np.zeros((cmap.n, cmap.n))
    out[iu] = thinned
    out.T[iu] = thinned
    return cmap.with_counts(out)


@dataclass
class NormalizedMap:
    values: np.ndarray
    scale: float

    def inverse(self):
        return self.values * self.scale


def normalize_values(cmap, percentile=99.9):
    """Clip at the given percentile of all entries and divide by it.

    A zero percentile (very sparse maps) falls back to the maximum entry.
    """
    counts = cmap.counts if isinstance(cmap, ContactMap) else np.asarray(cmap, dtype=np.float64)
    scale = float(np.percentile(counts, percentile))
    if scale <= 0:
        scale = float(counts.max())
    if scale <= 0:
        raise ScaleError("cannot normalize an all-zero map")
    return NormalizedMap(np.minimum(counts, scale) / scale, scale)


# ---------------------------------------------------------------------------
# Patches


@dataclass
class PatchSet:
    patches: np.ndarray  # (k, size, size)
    origins: list  # (row_block, col_block) per patch
    n: int
    size: int = PATCH_SIZE
    chrom: str = ""

    @property
    def blocks(self):
        return self.n // self.size

    def __len__(self):
        return len(self.patches)


def extract_patches(values, size=PATCH_SIZE, chrom=""):
    """Non-overlapping ``size x size`` tiles of the top-left block-aligned square."""
    if isinstance(values, ContactMap):
        chrom = chrom or values.chrom
        values = values.counts
    values = np.asarray(values)
    n = values.shape[0]
    if n < size:
        raise DomainError(f"map of size {n} is smaller than one {size}x{size} patch")
    k = n // size
    tiles = values[: k * size, : k * size].reshape(k, size, k, size).transpose(0, 2, 1, 3)
    origins = [(r, c) for r in range(k) for c in range(k)]
    return PatchSet(tiles.reshape(k * k, size, size).copy(), origins, n, size, chrom)


def reassemble(patchset):
    k, size = patchset.blocks, patchset.size
    out = np.zeros((k * size, k * size), dtype=patchset.patches.dtype)
    for patch, (r, c) in zip(patchset.patches, patchset.origins):
        out[r * size:(r + 1) * size, c * size:(c + 1) * size] = patch
    return out


# ---------------------------------------------------------------------------
# Splits


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def assignment(self, label):
        for name in ("train", "validation", "test"):
            if label in getattr(self, name):
                return name
        raise KeyError(label)


_CHROM_RE = re.compile(r"^(?:chr)?([0-9]+|X|Y|M|MT)$", re.IGNORECASE)


def chromosome_key(label):
    """``"chr4"`` / ``"4"`` -> ``"4"``; ``None`` for unrecognised labels."""
    m = _CHROM_RE.match(str(label).strip())
    return m.group(1).upper() if m else None


def split_dataset(labels, validation=VALIDATION_CHROMS, test=TEST_CHROMS):
    """Assign chromosome labels to train/validation/test by chromosome number."""
    val_keys = {str(v) for v in validation}
    test_keys = {str(t) for t in test}
    if val_keys & test_keys:
        raise DomainError(f"validation and test chromosomes overlap: {sorted(val_keys & test_keys)}")
    split = DatasetSplit()
    for label in labels:
        key = chromosome_key(label)
        if key is None:
            log.warning("unrecognised chromosome label %r assigned to train", label)
            split.train.append(label)
        elif key in test_keys:
            split.test.append(label)
        elif key in val_keys:
            split.validation.append(label)
        else:
            split.train.append(label)
    return split


# ---------------------------------------------------------------------------
# Synthetic maps


@dataclass
class SynthParams:
    depth: float = 1000.0  # expected count on the main diagonal
    tads: int = 6
    loops: int = 4
    tad_min: int = 10
    tad_max: int = 40
    tad_enrichment: float = 3.0
    loop_enrichment: float = 8.0
    bin_size: int = 10_000


def synthesize_map(n, seed=0, params=None, chrom="chrSynth"):
    """Poisson-sampled contact map with distance decay, TAD blocks and loop peaks.

    The expected count is ``depth / (1 + |i - j|)``, multiplied inside each TAD
    block and again at the corner pixel of the first ``loops`` TADs.
    """
    params = params or SynthParams()
    if n < PATCH_SIZE:
        raise DomainError(f"synthetic maps need n >= {PATCH_SIZE}, got {n}")
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    expected = params.depth / (1.0 + np.abs(idx[:, None] - idx[None, :]))
    tads = _draw_tads(n, rng, params)
    for start, end in tads:
        expected[start:end + 1, start:end + 1] *= params.tad_enrichment
    for start, end in tads[: params.loops]:
        expected[start, end] *= params.loop_enrichment
        expected[end, start] = expected[start, end]
    iu = np.triu_indices(n)
    draws = rng.poisson(expected[iu])
    counts = np.zeros((n, n))
    counts[iu] = draws
    counts.T[iu] = draws
    return ContactMap(counts, params.bin_size, chrom)


def _draw_tads(n, rng, params):
    tads = []
    for _ in range(params.tads):
        width = int(rng.integers(params.tad_min, params.tad_max + 1))
        start = int(rng.integers(0, max(1, n - width)))
        tads.append((start, min(n - 1, start + width - 1)))
    return tads


def tad_mask(n, seed=0, params=None):
    """Boolean mask of the pixels ``synthesize_map(n, seed, params)`` enriched as TADs."""
    tads = _draw_tads(n, np.random.default_rng(seed), params or SynthParams())
    mask = np.zeros((n, n), dtype=bool)
    for start, end in tads:
        mask[start:end + 1, start:end + 1] = True
    return mask


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class PatchPairs:
    inputs: PatchSet
    targets: PatchSet
    input_scale: float
    target_scale: float


def prepare_pairs(raw, ratio=1 / 16, seed=0, size=PATCH_SIZE, balance_tol=1e-6, balance_iter=1000,
                  percentile=99.9):
    """Low/high-coverage patch pairs from one raw map.

    Inputs: balance, downsample, normalize, tile. Targets skip downsampling.
    """
    balanced = balance(raw, balance_tol, balance_iter)
    low = normalize_values(downsample_reads(balanced, ratio, seed), percentile)
    high = normalize_values(balanced, percentile)
    return PatchPairs(
        extract_patches(low.values, size, raw.chrom),
        extract_patches(high.values, size, raw.chrom),
        low.scale,
        high.scale,
    )
