"""MRC/MRCS image-stack I/O and STAR metadata parsing.

Only MRC mode 2 (32-bit IEEE float) is handled; the reader honors the
machine stamp, skips extended headers by NSYMBT, and preserves all
non-statistics header fields so that write(read(f)) reproduces a
conforming file byte for byte (statistics words are recomputed).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MrcStack",
    "CtfParams",
    "FormatError",
    "read_mrc_stack",
    "write_mrc_stack",
    "read_star",
    "read_star_ctf",
]

HEADER_SIZE = 1024
MACHST_OFFSET = 212
_LE_STAMP = b"\x44\x44\x00\x00"
_BE_STAMP = b"\x11\x11\x00\x00"

# word layout of the fixed MRC2014 header, after the 10 leading ints
_INT_WORDS = ("nx", "ny", "nz", "mode", "nxstart", "nystart", "nzstart", "mx", "my", "mz")
_CELL_WORDS = ("xlen", "ylen", "zlen", "alpha", "beta", "gamma")
_MAP_WORDS = ("mapc", "mapr", "maps")
_STAT_WORDS = ("dmin", "dmax", "dmean")


class FormatError(ValueError):
    """Malformed or unsupported on-disk data; message carries the byte offset."""


@dataclass
class CtfParams:
    """Microscope parameters sufficient to evaluate the CTF sign."""

    voltage: float               # kV
    spherical_aberration: float  # mm
    amplitude_contrast: float    # fraction in [0, 1)
    defocus_u: float             # Angstrom
    defocus_v: float             # Angstrom
    astigmatism_angle: float     # degrees
    phase_shift: float = 0.0     # degrees

    def __post_init__(self):
        if self.defocus_u <= 0 or self.defocus_v <= 0:
            raise ValueError(
                f"defocus must be positive, got u={self.defocus_u}, v={self.defocus_v}"
            )
        if not 0.0 <= self.amplitude_contrast < 1.0:
            raise ValueError(
                f"amplitude contrast must be in [0, 1), got {self.amplitude_contrast}"
            )


@dataclass
class MrcStack:
    """A stack of square float32 images plus the header needed to round-trip it."""

    data: np.ndarray          # (n_images, side, side) float32, native order
    pixel_size: float = 1.0   # Angstrom / pixel
    header: dict = field(default_factory=dict)
    ext_header: bytes = b""

    @property
    def n_images(self) -> int:
        return self.data.shape[0]

    @property
    def side(self) -> int:
        return self.data.shape[1]


def _default_header(nx: int, ny: int, nz: int, pixel_size: float) -> dict:
    hdr = {
        "nx": nx, "ny": ny, "nz": nz, "mode": 2,
        "nxstart": 0, "nystart": 0, "nzstart": 0,
        "mx": nx, "my": ny, "mz": nz,
        "xlen": nx * pixel_size, "ylen": ny * pixel_size, "zlen": nz * pixel_size,
        "alpha": 90.0, "beta": 90.0, "gamma": 90.0,
        "mapc": 1, "mapr": 2, "maps": 3,
        "dmin": 0.0, "dmax": 0.0, "dmean": 0.0,
        "ispg": 0, "nsymbt": 0,
        "extra": b"\x00" * 100,
        "xorigin": 0.0, "yorigin": 0.0, "zorigin": 0.0,
        "map": b"MAP ",
        "rms": 0.0, "nlabl": 0,
        "labels": b"\x00" * 800,
    }
    return hdr


def read_mrc_stack(path) -> MrcStack:
    """Read an MRC2014 mode-2 stack, honoring the machine stamp.

    Raises FormatError (with byte offsets) on short headers, unsupported
    modes, non-square frames, or a truncated data section.
    """
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise FormatError(
                f"truncated header: got {len(raw)} bytes, need {HEADER_SIZE} at offset 0"
            )

        stamp = raw[MACHST_OFFSET:MACHST_OFFSET + 4]
        if stamp[:1] == _LE_STAMP[:1]:
            endian = "<"
        elif stamp[:1] == _BE_STAMP[:1]:
            endian = ">"
        else:
            # stamp unmaintained by some writers; fall back to a plausibility check
            nx_le, = struct.unpack_from("<i", raw, 0)
            endian = "<" if 0 < nx_le < 65536 else ">"
            warnings.warn(
                f"unrecognized machine stamp {stamp!r} at offset {MACHST_OFFSET}; "
                f"assuming {'little' if endian == '<' else 'big'}-endian"
            )

        hdr = {}
        vals = struct.unpack_from(endian + "10i", raw, 0)
        hdr.update(zip(_INT_WORDS, vals))
        vals = struct.unpack_from(endian + "6f", raw, 40)
        hdr.update(zip(_CELL_WORDS, vals))
        vals = struct.unpack_from(endian + "3i", raw, 64)
        hdr.update(zip(_MAP_WORDS, vals))
        vals = struct.unpack_from(endian + "3f", raw, 76)
        hdr.update(zip(_STAT_WORDS, vals))
        hdr["ispg"], hdr["nsymbt"] = struct.unpack_from(endian + "2i", raw, 88)
        hdr["extra"] = raw[96:196]
        hdr["xorigin"], hdr["yorigin"], hdr["zorigin"] = struct.unpack_from(
            endian + "3f", raw, 196
        )
        hdr["map"] = raw[208:212]
        hdr["rms"], = struct.unpack_from(endian + "f", raw, 216)
        hdr["nlabl"], = struct.unpack_from(endian + "i", raw, 220)
        hdr["labels"] = raw[224:1024]

        if hdr["mode"] != 2:
            raise FormatError(
                f"unsupported MRC mode {hdr['mode']} at offset 12; "
                "only mode 2 (32-bit float) is handled"
            )
        nx, ny, nz = hdr["nx"], hdr["ny"], hdr["nz"]
        if nx <= 0 or ny <= 0 or nz <= 0:
            raise FormatError(f"non-positive dimensions ({nx}, {ny}, {nz}) at offset 0")
        if nx != ny:
            raise FormatError(f"non-square frames {nx}x{ny} at offset 0")

        nsymbt = hdr["nsymbt"]
        if nsymbt < 0:
            raise FormatError(f"negative NSYMBT {nsymbt} at offset 92")
        ext = fh.read(nsymbt)
        if len(ext) < nsymbt:
            raise FormatError(
                f"truncated extended header: got {len(ext)} of {nsymbt} bytes "
                f"at offset {HEADER_SIZE}"
            )

        count = nx * ny * nz
        payload = fh.read(4 * count)
        if len(payload) < 4 * count:
            raise FormatError(
                f"truncated data section: got {len(payload)} of {4 * count} bytes "
                f"at offset {HEADER_SIZE + nsymbt}"
            )

    data = np.frombuffer(payload, dtype=endian + "f4").reshape(nz, ny, nx)
    data = np.ascontiguousarray(data.astype("<f4", copy=False))

    pixel_size = 1.0
    if hdr["mx"] > 0 and hdr["xlen"] > 0:
        pixel_size = float(hdr["xlen"]) / hdr["mx"]

    return MrcStack(data=data, pixel_size=pixel_size, header=hdr, ext_header=ext)


def write_mrc_stack(stack: MrcStack, path) -> None:
    """Write a stack as little-endian mode-2 MRC, recomputing data statistics.

    NaN pixels pass through untouched; min/max/mean/rms ignore them.
    """
    data = np.asarray(stack.data)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, side, side) stack, got shape {data.shape}")
    data = data.astype("<f4", copy=False)
    nz, ny, nx = data.shape

    hdr = dict(stack.header) if stack.header else {}
    base = _default_header(nx, ny, nz, stack.pixel_size)
    for key, val in base.items():
        hdr.setdefault(key, val)
    hdr["nx"], hdr["ny"], hdr["nz"] = nx, ny, nz
    hdr["mode"] = 2
    hdr["nsymbt"] = len(stack.ext_header)

    finite = data[np.isfinite(data)]
    if finite.size:
        hdr["dmin"] = float(finite.min())
        hdr["dmax"] = float(finite.max())
        hdr["dmean"] = float(finite.mean(dtype=np.float64))
        hdr["rms"] = float(finite.std(dtype=np.float64))
    else:
        hdr["dmin"] = hdr["dmax"] = hdr["dmean"] = hdr["rms"] = 0.0

    buf = bytearray(HEADER_SIZE)
    struct.pack_into("<10i", buf, 0, *(int(hdr[k]) for k in _INT_WORDS))
    struct.pack_into("<6f", buf, 40, *(float(hdr[k]) for k in _CELL_WORDS))
    struct.pack_into("<3i", buf, 64, *(int(hdr[k]) for k in _MAP_WORDS))
    struct.pack_into("<3f", buf, 76, *(float(hdr[k]) for k in _STAT_WORDS))
    struct.pack_into("<2i", buf, 88, int(hdr["ispg"]), int(hdr["nsymbt"]))
    buf[96:196] = bytes(hdr["extra"])[:100].ljust(100, b"\x00")
    struct.pack_into(
        "<3f", buf, 196,
        float(hdr["xorigin"]), float(hdr["yorigin"]), float(hdr["zorigin"]),
    )
    buf[208:212] = b"MAP "
    buf[MACHST_OFFSET:MACHST_OFFSET + 4] = _LE_STAMP
    struct.pack_into("<f", buf, 216, float(hdr["rms"]))
    struct.pack_into("<i", buf, 220, int(hdr["nlabl"]))
    buf[224:1024] = bytes(hdr["labels"])[:800].ljust(800, b"\x00")

    with open(path, "wb") as fh:
        fh.write(bytes(buf))
        fh.write(stack.ext_header)
        fh.write(data.tobytes(order="C"))


# ---------------------------------------------------------------------------
# STAR parsing
# ---------------------------------------------------------------------------

def _strip_comment(line: str) -> str:
    pos = line.find("#")
    return line[:pos] if pos >= 0 else line


def read_star(path) -> dict:
    """Parse a STAR file into {block_name: {"labels": [...], "rows": [[...]]}}.

    Handles comments, blank lines, loop_ tables, and bare ``_label value``
    pairs (returned as a single-row table). Column order is arbitrary.
    """
    blocks: dict[str, dict] = {}
    cur_name = ""
    cur: dict | None = None
    in_loop_header = False
    in_loop_body = False

    def _ensure_block():
        nonlocal cur
        if cur is None:
            cur = {"labels": [], "rows": [], "pairs": {}}
            blocks[cur_name] = cur
        return cur

    with open(path, "r") as fh:
        for lineno, rawline in enumerate(fh, start=1):
            line = _strip_comment(rawline).strip()
            if not line:
                continue
            if line.startswith("data_"):
                cur_name = line[len("data_"):]
                cur = {"labels": [], "rows": [], "pairs": {}}
                blocks[cur_name] = cur
                in_loop_header = in_loop_body = False
                continue
            if line == "loop_":
                blk = _ensure_block()
                if blk["labels"] or blk["rows"]:
                    # second loop in one block: keep the first table, start fresh
                    cur_name = cur_name + "+loop"
                    cur = {"labels": [], "rows": [], "pairs": {}}
                    blocks[cur_name] = cur
                in_loop_header = True
                in_loop_body = False
                continue
            if line.startswith("_"):
                parts = line.split(None, 1)
                label = parts[0][1:]
                if in_loop_header:
                    _ensure_block()["labels"].append(label)
                elif len(parts) == 2:
                    _ensure_block()["pairs"][label] = parts[1].strip()
                else:
                    raise FormatError(f"malformed label line {lineno}: {rawline.rstrip()!r}")
                continue
            # data row
            if in_loop_header:
                in_loop_header = False
                in_loop_body = True
            if not in_loop_body:
                raise FormatError(f"data row outside loop at line {lineno}: {rawline.rstrip()!r}")
            blk = _ensure_block()
            toks = line.split()
            if len(toks) != len(blk["labels"]):
                raise FormatError(
                    f"malformed loop row at line {lineno}: expected {len(blk['labels'])} "
                    f"columns, got {len(toks)}"
                )
            blk["rows"].append(toks)

    return blocks


# relion-style label stems, matched case-insensitively with optional rln prefix
_CTF_LABELS = {
    "defocusu": "defocus_u",
    "defocusv": "defocus_v",
    "defocusangle": "astigmatism_angle",
    "voltage": "voltage",
    "sphericalaberration": "spherical_aberration",
    "amplitudecontrast": "amplitude_contrast",
    "phaseshift": "phase_shift",
    "opticsgroup": "optics_group",
}

_CTF_DEFAULTS = {
    "voltage": 300.0,
    "spherical_aberration": 2.7,
    "amplitude_contrast": 0.07,
    "phase_shift": 0.0,
}


def _canon_label(label: str) -> str | None:
    stem = label.lower()
    if stem.startswith("rln"):
        stem = stem[3:]
    return _CTF_LABELS.get(stem)


def _column_map(labels: list[str]) -> dict[str, int]:
    out = {}
    for idx, label in enumerate(labels):
        canon = _canon_label(label)
        if canon is not None and canon not in out:
            out[canon] = idx
    return out


def read_star_ctf(path) -> list[CtfParams]:
    """Extract one CtfParams per particle row, in file order.

    The particle table is the loop containing a defocus-U column. Optics
    constants (voltage, Cs, amplitude contrast) absent there are pulled from
    an optics table, matched by optics group when present; anything still
    missing falls back to documented defaults (300 kV, 2.7 mm, 0.07).
    """
    blocks = read_star(path)

    particle_blk = None
    for blk in blocks.values():
        if "defocus_u" in _column_map(blk["labels"]):
            particle_blk = blk
            break
    if particle_blk is None:
        raise FormatError("no loop with a defocus-U column found (mandatory)")

    cols = _column_map(particle_blk["labels"])

    optics_rows: dict[int | None, dict] = {}
    for blk in blocks.values():
        if blk is particle_blk:
            continue
        ocols = _column_map(blk["labels"])
        interesting = {"voltage", "spherical_aberration", "amplitude_contrast"}
        if blk["rows"] and (interesting & set(ocols)):
            for row in blk["rows"]:
                group = int(float(row[ocols["optics_group"]])) if "optics_group" in ocols else None
                optics_rows[group] = {
                    name: float(row[ocols[name]]) for name in interesting if name in ocols
                }
        for label, value in blk["pairs"].items():
            canon = _canon_label(label)
            if canon in interesting:
                optics_rows.setdefault(None, {})[canon] = float(value)

    params = []
    for rowno, row in enumerate(particle_blk["rows"]):
        def get(name, default=None):
            if name in cols:
                return float(row[cols[name]])
            return default

        group = int(get("optics_group")) if "optics_group" in cols else None
        optics = optics_rows.get(group, optics_rows.get(None, {}))

        def resolve(name):
            val = get(name)
            if val is None:
                val = optics.get(name)
            if val is None:
                val = _CTF_DEFAULTS[name]
            return val

        du = get("defocus_u")
        if du is None:
            raise FormatError(f"missing defocus at particle row {rowno}")
        dv = get("defocus_v", du)
        params.append(
            CtfParams(
                voltage=resolve("voltage"),
                spherical_aberration=resolve("spherical_aberration"),
                amplitude_contrast=resolve("amplitude_contrast"),
                defocus_u=du,
                defocus_v=dv,
                astigmatism_angle=get("astigmatism_angle", 0.0),
                phase_shift=resolve("phase_shift"),
            )
        )
    return params
