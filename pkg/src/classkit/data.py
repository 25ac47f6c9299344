"""Synthetic saliency data and 8-bit netpbm I/O.

Images are binary PPM (P6), masks and other single-channel maps binary PGM
(P5), both with maxval 255.  Reals map to bytes by ``floor(v * 255 + 0.5)``
clamped to 0..255.

The generator draws every sample from ``default_rng([seed, index])`` and
rasterises with integer arithmetic only, so a seed always yields the same
bytes.  Each image holds a textured background, one large salient object
(ellipse, star polygon, or a two-tone composite whose halves differ in
colour) and up to three small high-contrast distractors that are not part of
the mask.  Generator metadata travels in the PPM header comments.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ManifestError, NetpbmFormatError, NetpbmParseError

MANIFEST_HEADER = "classkit-manifest v1"
KINDS = ("ellipse", "polygon", "two_tone")
KIND_WEIGHTS = (0.3, 0.3, 0.4)
MIN_FRACTION, MAX_FRACTION = 0.02, 0.7
MASK_THRESHOLD = 128


# -- netpbm ------------------------------------------------------------------

def to_bytes(values) -> np.ndarray:
    """Quantise reals in [0, 1] to uint8 (round half up, clamped)."""
    arr = np.asarray(values)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.floor(arr.astype(np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_pnm(values, comments=()) -> bytes:
    """Encode (H, W), (1, H, W) as P5 or (3, H, W) as P6."""
    data = to_bytes(values)
    if data.ndim == 3 and data.shape[0] == 1:
        data = data[0]
    if data.ndim == 2:
        magic, payload = b"P5", data
    elif data.ndim == 3 and data.shape[0] == 3:
        magic, payload = b"P6", np.moveaxis(data, 0, -1)
    else:
        raise ContractError(f"cannot encode an array of shape {data.shape} as PGM/PPM")
    h, w = data.shape[-2:]
    lines = [magic]
    for c in comments:
        if "\n" in c:
            raise ContractError("netpbm comments must be single lines")
        lines.append(b"# " + c.encode())
    lines.append(f"{w} {h}".encode())
    lines.append(b"255")
    return b"\n".join(lines) + b"\n" + np.ascontiguousarray(payload).tobytes()


_WS = b" \t\n\r\x0b\x0c"


def decode_pnm(buf: bytes) -> tuple[np.ndarray, list[str]]:
    """Return ``(uint8 array, comments)``; RGB comes back as (3, H, W), grey as (H, W)."""
    if buf[:2] not in (b"P5", b"P6"):
        raise NetpbmFormatError(f"unsupported magic {buf[:2]!r}; expected P5 or P6")
    channels = 1 if buf[:2] == b"P5" else 3
    pos, comments, numbers = 2, [], []
    if pos >= len(buf) or buf[pos] not in _WS:
        raise NetpbmParseError("expected whitespace after magic", pos)
    while len(numbers) < 3:
        if pos >= len(buf):
            raise NetpbmParseError("header ends early", pos)
        ch = buf[pos]
        if ch in _WS:
            pos += 1
        elif ch == ord("#"):
            end = buf.find(b"\n", pos)
            if end < 0:
                raise NetpbmParseError("unterminated comment", pos)
            comments.append(buf[pos + 1:end].decode("latin-1").strip())
            pos = end + 1
        elif 48 <= ch <= 57:
            start = pos
            while pos < len(buf) and 48 <= buf[pos] <= 57:
                pos += 1
            numbers.append((int(buf[start:pos]), start))
        else:
            raise NetpbmParseError(f"unexpected byte {bytes([ch])!r} in header", pos)
    (w, w_at), (h, h_at), (maxval, m_at) = numbers
    if w == 0 or h == 0:
        raise NetpbmParseError("zero image extent", w_at if w == 0 else h_at)
    if maxval != 255:
        raise NetpbmParseError(f"only 8-bit maxval 255 is supported, got {maxval}", m_at)
    if pos >= len(buf) or buf[pos] not in _WS:
        raise NetpbmParseError("expected a single whitespace byte before the raster", pos)
    pos += 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise NetpbmParseError(f"raster truncated: need {need} bytes, have {len(buf) - pos}", len(buf))
    if len(buf) - pos > need:
        raise NetpbmParseError(f"{len(buf) - pos - need} trailing bytes after raster", pos + need)
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    if channels == 1:
        return raster.reshape(h, w).copy(), comments
    return np.moveaxis(raster.reshape(h, w, 3), -1, 0).copy(), comments


def write_image(path, values, comments=()) -> None:
    Path(path).write_bytes(encode_pnm(values, comments))


def read_raw(path) -> tuple[np.ndarray, list[str]]:
    return decode_pnm(Path(path).read_bytes())


def read_image(path) -> np.ndarray:
    """Read a PPM as (3, H, W) or a PGM as (1, H, W), scaled to [0, 1]."""
    data, _ = read_raw(path)
    if data.ndim == 2:
        data = data[None]
    return data.astype(np.float64) / 255.0


# -- samples and manifests ---------------------------------------------------

@dataclass
class SaliencySample:
    id: str
    image: np.ndarray          # (3, H, W) in [0, 1]
    mask: np.ndarray           # (1, H, W) in {0, 1}
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str, str]]
    split: str = "train"
    seed: int | None = None

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.txt"
        lines = [MANIFEST_HEADER, f"# split={self.split}"]
        if self.seed is not None:
            lines.append(f"# seed={self.seed}")
        lines += ["\t".join(entry) for entry in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{path}: first line must be {MANIFEST_HEADER!r}")
    split, seed, entries, seen = "train", None, [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*(\w+)=(\S+)", line)
            if m and m.group(1) == "split":
                split = m.group(2)
            elif m and m.group(1) == "seed":
                seed = int(m.group(2))
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected id<TAB>image<TAB>mask")
        if parts[0] in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {parts[0]!r}")
        seen.add(parts[0])
        entries.append((parts[0], parts[1], parts[2]))
    return DatasetManifest(path.parent, entries, split, seed)


def _parse_meta(comments: list[str]) -> dict:
    meta = {}
    for c in comments:
        for key, value in re.findall(r"(\w+)=(\S+)", c):
            meta[key] = int(value) if value.lstrip("-").isdigit() else value
    return meta


def load_dataset(manifest) -> list[SaliencySample]:
    """Load samples in manifest order; masks are binarised at byte >= 128."""
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    if not manifest.entries:
        raise ContractError(f"manifest under {manifest.root} lists no samples")
    samples = []
    for sample_id, image_rel, mask_rel in manifest.entries:
        image_path, mask_path = manifest.root / image_rel, manifest.root / mask_rel
        for p in (image_path, mask_path):
            if not p.is_file():
                raise ManifestError(f"sample {sample_id}: missing file {p}")
        image, comments = read_raw(image_path)
        mask, _ = read_raw(mask_path)
        if image.ndim != 3 or mask.ndim != 2 or image.shape[1:] != mask.shape:
            raise ManifestError(f"sample {sample_id}: image {image.shape} and mask {mask.shape} do not pair up")
        samples.append(SaliencySample(sample_id, image.astype(np.float64) / 255.0,
                                      (mask >= MASK_THRESHOLD).astype(np.float64)[None], _parse_meta(comments)))
    return samples


# -- generator ---------------------------------------------------------------

def _contrast_colour(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    """A colour at least 50 levels away from ``base`` in every channel."""
    delta = rng.integers(50, 111, size=3)
    sign = np.where(rng.integers(0, 2, size=3) == 1, 1, -1)
    colour = base + sign * delta
    flip = (colour < 0) | (colour > 255)
    colour[flip] = base[flip] - sign[flip] * delta[flip]
    return np.clip(colour, 0, 255)


def _background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    base = rng.integers(60, 197, size=3)
    grad = rng.integers(-30, 31, size=(3, 2))
    img = base[:, None, None] + (grad[:, 0, None, None] * (xx - size // 2)
                                 + grad[:, 1, None, None] * (yy - size // 2)) // size
    period = max(2, int(rng.integers(4, 13)) * size // 64)
    amp = int(rng.integers(6, 21))
    slope = int(rng.integers(-2, 3))
    if rng.integers(0, 2):
        texture = ((xx + slope * yy) // period) % 2
    else:
        texture = ((xx // period) + (yy // period)) % 2
    img = img + amp * texture[None] + rng.integers(-8, 9, size=(3, size, size))
    return img, base


def _ellipse(rng: np.random.Generator, size: int, yy, xx) -> np.ndarray:
    rx = int(rng.integers(size * 15 // 100, size * 40 // 100 + 1))
    ry = int(rng.integers(size * 15 // 100, size * 40 // 100 + 1))
    cx = int(rng.integers(size // 4, 3 * size // 4 + 1))
    cy = int(rng.integers(size // 4, 3 * size // 4 + 1))
    dx, dy = xx - cx, yy - cy
    return dx * dx * ry * ry + dy * dy * rx * rx <= rx * rx * ry * ry


def _polygon(rng: np.random.Generator, size: int, yy, xx) -> np.ndarray:
    """Star-shaped polygon, even-odd rule at doubled (integer) pixel centres."""
    n = int(rng.integers(3, 9))
    cx = int(rng.integers(size // 4, 3 * size // 4 + 1))
    cy = int(rng.integers(size // 4, 3 * size // 4 + 1))
    # angles in 1/1000 turn, radii in pixels; trig only to place integer vertices
    turns = np.sort(rng.choice(1000, size=n, replace=False))
    radii = rng.integers(size * 18 // 100, size * 42 // 100 + 1, size=n)
    ang = turns * (2 * np.pi / 1000)
    vx = (2 * cx + np.round(2 * radii * np.cos(ang))).astype(np.int64)
    vy = (2 * cy + np.round(2 * radii * np.sin(ang))).astype(np.int64)
    px, py = 2 * xx + 1, 2 * yy + 1
    inside = np.zeros(xx.shape, dtype=bool)
    for k in range(n):
        x1, y1, x2, y2 = vx[k], vy[k], vx[(k + 1) % n], vy[(k + 1) % n]
        if y1 == y2:
            continue
        spans = (y1 > py) != (y2 > py)
        lhs = (px - x1) * (y2 - y1)
        rhs = (py - y1) * (x2 - x1)
        left = lhs < rhs if y2 > y1 else lhs > rhs
        inside ^= spans & left
    return inside


def _draw_sample(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray, dict]:
    yy, xx = np.mgrid[0:size, 0:size]
    img, base = _background(rng, size)
    kind = KINDS[int(rng.choice(3, p=KIND_WEIGHTS))]
    while True:
        shape = _polygon(rng, size, yy, xx) if (kind == "polygon" or (kind == "two_tone" and rng.integers(0, 2))) \
            else _ellipse(rng, size, yy, xx)
        if MIN_FRACTION <= shape.mean() <= MAX_FRACTION:
            break
    colour = _contrast_colour(rng, base)
    fill = np.broadcast_to(colour[:, None, None], img.shape).copy()
    if kind == "two_tone":
        second = _contrast_colour(rng, base)
        while np.abs(second - colour).sum() < 120:
            second = _contrast_colour(rng, base)
        rows, cols = np.nonzero(shape)
        cy, cx = int(rows.mean()), int(cols.mean())
        ax, ay = int(rng.integers(-8, 9)), int(rng.integers(-8, 9))
        if ax == 0 and ay == 0:
            ax = 1
        half = (xx - cx) * ax + (yy - cy) * ay >= 0
        fill[:, half] = second[:, None]
    fill = fill + rng.integers(-6, 7, size=img.shape)
    img = np.where(shape[None], fill, img)

    # distractors: small, high contrast, kept clear of the object
    want = int(rng.integers(0, 4))
    placed = 0
    for _ in range(want):
        r = int(rng.integers(2, 6)) * size // 64 or 1
        colour_d = _contrast_colour(rng, base)
        for _attempt in range(20):
            cx, cy = int(rng.integers(r, size - r)), int(rng.integers(r, size - r))
            square = bool(rng.integers(0, 2))
            if square:
                blob = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
            else:
                blob = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            margin = r + 3
            near = (np.abs(xx - cx) <= margin) & (np.abs(yy - cy) <= margin)
            if not (near & shape).any():
                img = np.where(blob[None], colour_d[:, None, None], img)
                placed += 1
                break
    contrast = int(np.abs(colour - base).sum() // 3)
    meta = {"kind": kind, "distractors": placed, "contrast": contrast}
    return np.clip(img, 0, 255).astype(np.uint8), shape.astype(np.uint8) * 255, meta


def render_sample(seed: int, index: int, size: int) -> SaliencySample:
    """Generate one sample in memory; identical to what :func:`generate` writes."""
    if size < 16 or size % 16:
        raise ContractError(f"size must be a positive multiple of 16, got {size}")
    image, mask, meta = _draw_sample(np.random.default_rng([seed, index]), size)
    return SaliencySample(f"s{index:05d}", image.astype(np.float64) / 255.0,
                          (mask >= MASK_THRESHOLD).astype(np.float64)[None], meta)


def generate(seed: int, count: int, size: int, out, split: str = "train") -> DatasetManifest:
    """Write ``count`` samples plus ``manifest.txt`` under ``out``."""
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    if size < 16 or size % 16:
        raise ContractError(f"size must be a positive multiple of 16, got {size}")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(count):
        image, mask, meta = _draw_sample(np.random.default_rng([seed, index]), size)
        sample_id = f"s{index:05d}"
        comment = " ".join(f"{k}={v}" for k, v in meta.items())
        write_image(out / "images" / f"{sample_id}.ppm", image, [comment])
        write_image(out / "masks" / f"{sample_id}.pgm", mask)
        entries.append((sample_id, f"images/{sample_id}.ppm", f"masks/{sample_id}.pgm"))
    manifest = DatasetManifest(out, entries, split, seed)
    manifest.write()
    return manifest
