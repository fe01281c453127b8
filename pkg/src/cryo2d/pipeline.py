"""Pipeline orchestration: formats -> preprocess -> spca -> neighbors -> sync -> em.

Every stage is a pure function of its inputs and is checkpointed as a
versioned binary blob carrying the config hash and a payload content hash,
so a run can resume from the deepest valid checkpoint. Stage wall-clock
times are reported with the column set {preprocess, sPCA, NN, EM, total}.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import em as em_mod
from . import formats, preprocess, spca, sync
from .neighbors import AngleGrid, NeighborTable, knn_search, pairwise_table, select_seeds

__all__ = [
    "PipelineConfig",
    "PipelineResult",
    "InputError",
    "StageFailure",
    "CheckpointError",
    "run_pipeline",
    "resume",
    "parse_config_file",
]

CHECKPOINT_MAGIC = b"CRYO2D\x01"
STAGES = ("preprocess", "spca", "neighbors", "sync")
TIMING_KEYS = ("preprocess", "sPCA", "NN", "EM", "total")


class InputError(ValueError):
    """Bad user input (missing files, inconsistent metadata, invalid config)."""


class StageFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class CheckpointError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    input_path: str = ""
    star_path: str | None = None
    out_dir: str = "out"
    num_classes: int = 3000
    keep_classes: int = 1500
    class_size: int = 300
    keep_members: int = 150
    n_coeffs: int = 500
    downsample: int = 89
    n_theta: int = 72
    bandlimit: float = 0.5
    phase_flip: bool = True
    whiten: bool = True
    noise_sample_count: int = 1000
    pca_sample_count: int = 20000
    em_iters: int = 7
    em_rotations: int = 72
    em_max_shift: int = 4
    em_on_raw: bool = False
    rng_seed: int = 0
    workers: int = 0  # 0 -> all available cores

    def validate(self) -> None:
        positive = (
            "num_classes", "keep_classes", "class_size", "keep_members",
            "n_coeffs", "downsample", "n_theta", "em_rotations",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive, got {getattr(self, name)}")
        if self.keep_classes > self.num_classes:
            raise InputError(
                f"keep_classes {self.keep_classes} exceeds num_classes {self.num_classes}"
            )
        if self.keep_members > self.class_size:
            raise InputError(
                f"keep_members {self.keep_members} exceeds class_size {self.class_size}"
            )
        if self.em_iters < 0 or self.em_max_shift < 0:
            raise InputError("em_iters and em_max_shift must be non-negative")

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


# out_dir and workers are execution details: changing them must not
# invalidate previously computed stage artifacts
_HASH_EXCLUDE = {"out_dir", "workers"}


def config_hash(config: PipelineConfig) -> str:
    payload = {k: v for k, v in asdict(config).items() if k not in _HASH_EXCLUDE}
    canon = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def parse_config_file(path) -> dict:
    """Plain key=value config file; '#' starts a comment."""
    out = {}
    valid = {f.name for f in fields(PipelineConfig)}
    types = {f.name: f.type for f in fields(PipelineConfig)}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in valid:
                raise InputError(f"{path}:{lineno}: unknown config key {key!r}")
            t = types[key]
            if "int" in str(t):
                out[key] = int(val)
            elif "float" in str(t):
                out[key] = float(val)
            elif "bool" in str(t):
                out[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                out[key] = val if val.lower() != "none" else None
    return out


def write_config_file(config: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        for key, val in asdict(config).items():
            fh.write(f"{key}={val}\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, stage: str, config: PipelineConfig, arrays: dict) -> None:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    header = {
        "version": 1,
        "stage": stage,
        "config_hash": config_hash(config),
        "config": {k: v for k, v in asdict(config).items() if k not in _HASH_EXCLUDE},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path, stage: str, config: PipelineConfig) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a cryo2d checkpoint")
        hlen = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupted header ({exc})") from exc
        payload = fh.read()

    if header.get("stage") != stage:
        raise CheckpointError(f"{path}: stage {header.get('stage')!r}, expected {stage!r}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: corrupted checkpoint (payload content hash mismatch)")
    if header.get("config_hash") != config_hash(config):
        saved = header.get("config", {})
        current = {k: v for k, v in asdict(config).items() if k not in _HASH_EXCLUDE}
        diffs = [
            f"  {k}: checkpoint={saved.get(k)!r} current={current.get(k)!r}"
            for k in sorted(set(saved) | set(current))
            if saved.get(k) != current.get(k)
        ]
        raise CheckpointError(
            f"{path}: config changed since checkpoint was written:\n" + "\n".join(diffs)
        )
    with np.load(io.BytesIO(payload), allow_pickle=False) as npz:
        return {k: npz[k] for k in npz.files}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _load_inputs(config: PipelineConfig):
    if not Path(config.input_path).exists():
        raise InputError(f"input stack not found: {config.input_path}")
    stack = formats.read_mrc_stack(config.input_path)
    if not np.all(np.isfinite(stack.data)):
        raise InputError("input stack contains NaN or infinite pixels")
    ctf = None
    if config.star_path:
        ctf = formats.read_star_ctf(config.star_path)
        if len(ctf) != stack.n_images:
            raise InputError(
                f"STAR row count {len(ctf)} does not match stack length {stack.n_images}"
            )
    return stack, ctf


def _quantized_ctf_key(p: formats.CtfParams) -> tuple:
    # one sign grid per defocus group; 10 A defocus quantum
    return (
        round(p.defocus_u / 10.0), round(p.defocus_v / 10.0),
        round(p.astigmatism_angle, 1), round(p.phase_shift, 1),
        round(p.voltage, 1), round(p.spherical_aberration, 2),
        round(p.amplitude_contrast, 3),
    )


def _stage_preprocess(config: PipelineConfig, stack: formats.MrcStack, ctf):
    images = stack.data.astype(np.float64)
    side = stack.side

    flipped_raw = None
    if config.phase_flip and ctf is not None:
        grids = {}
        out = np.empty_like(images)
        for i, p in enumerate(ctf):
            key = _quantized_ctf_key(p)
            if key not in grids:
                grids[key] = preprocess.ctf_sign(p, side, stack.pixel_size)
            out[i] = preprocess.phase_flip(images[i], grids[key])
        images = out
        if config.em_on_raw:
            flipped_raw = images.astype(np.float32)

    target = config.downsample
    if target > side:
        raise InputError(
            f"downsample target {target} larger than image side {side}"
        )
    if target < side:
        images = np.stack([preprocess.fourier_downsample(im, target) for im in images])

    psd = None
    if config.whiten:
        radius = 0.45 * images.shape[1]
        spectrum = preprocess.estimate_noise_spectrum(
            images, radius, max_images=config.noise_sample_count
        )
        images = np.stack([preprocess.whiten(im, spectrum) for im in images])
        psd = spectrum.radial_psd

    out = {"images": images.astype(np.float32)}
    if psd is not None:
        out["noise_psd"] = psd
    if flipped_raw is not None:
        out["raw_flipped"] = flipped_raw
    return out


def _stage_spca(config: PipelineConfig, images: np.ndarray):
    basis = spca.build_basis(
        images.shape[1],
        bandlimit=config.bandlimit,
        images=images,
        n_coeffs=config.n_coeffs,
        max_sample=config.pca_sample_count,
    )
    coeffs = spca.expand(images, basis)
    return {
        "coeffs": coeffs.coeffs.astype(np.complex64),
        "freqs": coeffs.freqs,
        "residuals": coeffs.residuals,
    }


def _stage_neighbors(config: PipelineConfig, coeffs: spca.SteerableCoeffs):
    n = coeffs.n_images
    if config.num_classes > n:
        raise InputError(f"num_classes {config.num_classes} exceeds {n} images")
    if config.class_size > n:
        raise InputError(f"class_size {config.class_size} exceeds {n} images")
    seeds = select_seeds(n, config.num_classes, config.rng_seed)
    grid = AngleGrid(config.n_theta)
    table = knn_search(seeds, coeffs, grid, config.class_size)
    return {
        "seeds": table.seeds,
        "neighbors": table.neighbors,
        "corr": table.corr,
        "angle": table.angle,
        "reflected": table.reflected,
    }


def _anchor_flags_to_seed(flags: np.ndarray, seed_row_refl: np.ndarray, kept: np.ndarray) -> np.ndarray:
    """Fix the global Z/2 sign so flags agree with the seed's frame."""
    seed_pos = np.nonzero(kept == 0)[0]
    if len(seed_pos):
        return flags ^ bool(flags[seed_pos[0]])
    agree = float(np.mean(flags == seed_row_refl))
    return flags if agree >= 0.5 else ~flags


def _stage_sync(config: PipelineConfig, coeffs: spca.SteerableCoeffs, table: NeighborTable):
    grid = AngleGrid(config.n_theta)
    n_classes = len(table.seeds)
    k = config.keep_members

    grades = np.empty(n_classes)
    lam1 = np.empty(n_classes)
    lam2 = np.empty(n_classes)
    member_ids = np.empty((n_classes, k), dtype=int)
    rel_angles = np.empty((n_classes, k))
    refl_flags = np.empty((n_classes, k), dtype=bool)
    member_grades = np.empty((n_classes, k))

    for c in range(n_classes):
        ids = table.neighbors[c]
        sub = spca.SteerableCoeffs(
            coeffs=coeffs.coeffs[ids], freqs=coeffs.freqs, residuals=None
        )
        pairs = pairwise_table(sub, grid)
        matrix = sync.build_sync_matrix(pairs)
        grades[c], lam1[c], lam2[c] = sync.class_grade(matrix)
        g = sync.rank2_member_grades(matrix)
        kept = sync.prune_members(g, k)
        sub_pairs = type(pairs)(
            theta=pairs.theta[np.ix_(kept, kept)],
            reflected=pairs.reflected[np.ix_(kept, kept)],
            corr=pairs.corr[np.ix_(kept, kept)],
        )
        flags = sync.reflection_sync(sub_pairs)
        flags = _anchor_flags_to_seed(flags, pairs.reflected[0, kept], kept)
        member_ids[c] = ids[kept]
        rel_angles[c] = pairs.theta[0, kept]
        refl_flags[c] = flags
        member_grades[c] = g[kept]

    kept_order = sync.prune_classes(grades, config.keep_classes)
    return {
        "grades": grades,
        "lambda1": lam1,
        "lambda2": lam2,
        "kept_order": kept_order,
        "member_ids": member_ids,
        "rel_angles": rel_angles,
        "refl_flags": refl_flags,
        "member_grades": member_grades,
    }


def _limit_worker_threads():
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except ImportError:
        pass


def _em_task(args):
    idx, members, rel, flags, n_iter, n_rot, max_shift = args
    result = em_mod.run_em(
        members, rel, flags, n_iter=n_iter, n_rotations=n_rot, max_shift=max_shift
    )
    return idx, result.image.astype(np.float32), result.sigma2, result.log_likelihood, result.resp_entropy


def _stage_em(config: PipelineConfig, images: np.ndarray, selection: dict):
    kept_order = selection["kept_order"]
    tasks = []
    for rank, c in enumerate(kept_order):
        ids = selection["member_ids"][c]
        tasks.append(
            (
                rank,
                images[ids],
                selection["rel_angles"][c],
                selection["refl_flags"][c],
                config.em_iters,
                config.em_rotations,
                config.em_max_shift,
            )
        )

    n = len(tasks)
    side = images.shape[1]
    averages = np.empty((n, side, side), dtype=np.float32)
    sigma2 = np.empty(n)
    loglik = np.full(n, np.nan)
    entropy = np.full(n, np.nan)

    workers = min(config.effective_workers(), max(n, 1))
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_limit_worker_threads) as pool:
            results = pool.map(_em_task, tasks, chunksize=max(1, n // (4 * workers)))
            for idx, image, s2, ll, ent in results:
                averages[idx] = image
                sigma2[idx] = s2
                loglik[idx] = np.nan if ll is None else ll
                entropy[idx] = np.nan if ent is None else ent
    else:
        for task in tasks:
            idx, image, s2, ll, ent = _em_task(task)
            averages[idx] = image
            sigma2[idx] = s2
            loglik[idx] = np.nan if ll is None else ll
            entropy[idx] = np.nan if ent is None else ent

    return {"averages": averages, "sigma2": sigma2, "log_likelihood": loglik, "entropy": entropy}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_grade_report(path, selection: dict) -> None:
    grades = selection["grades"]
    order = np.argsort(-grades, kind="stable")
    kept = set(int(i) for i in selection["kept_order"])
    with open(path, "w") as fh:
        fh.write(
            "rank\tclass_id\tgrade_G\tlambda1\tlambda2\tkept\tmember_ids\tmember_grades\n"
        )
        for rank, c in enumerate(order):
            is_kept = int(c) in kept
            ids = ",".join(str(int(i)) for i in selection["member_ids"][c]) if is_kept else ""
            gs = (
                ",".join(f"{g:.6g}" for g in selection["member_grades"][c]) if is_kept else ""
            )
            fh.write(
                f"{rank}\t{int(c)}\t{grades[c]:.6f}\t{selection['lambda1'][c]:.6f}\t"
                f"{selection['lambda2'][c]:.6f}\t{int(is_kept)}\t{ids}\t{gs}\n"
            )


def write_timing_report(path, timings: dict) -> None:
    with open(path, "w") as fh:
        for key in TIMING_KEYS:
            fh.write(f"{key}\t{timings.get(key, 0.0):.3f}\n")


@dataclass
class PipelineResult:
    out_dir: str
    averages_path: str
    grades_path: str
    timing_path: str
    timings: dict = field(default_factory=dict)
    n_kept: int = 0


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _checkpoint_path(config: PipelineConfig, stage: str) -> Path:
    return Path(config.out_dir) / "checkpoints" / f"{stage}.ckpt"


def run_pipeline(config: PipelineConfig, resume_run: bool = False) -> PipelineResult:
    config.validate()
    out = Path(config.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    write_config_file(config, out / "config.cfg")

    timings = {}
    manifest = {"config_hash": config_hash(config), "stages": [], "outputs": []}
    t_total = time.perf_counter()
    stage = "input"

    def _finish_stage(name, t0):
        timings[name] = time.perf_counter() - t0
        manifest["stages"].append(name)

    try:
        artifacts = {}
        pending = False  # once a checkpoint is missing, later ones are stale

        def _run_stage(name, timing_key, compute):
            nonlocal pending, stage
            stage = name
            t0 = time.perf_counter()
            path = _checkpoint_path(config, name)
            if resume_run and not pending and path.exists():
                artifacts[name] = load_checkpoint(path, name, config)
            else:
                pending = True
                artifacts[name] = compute()
                save_checkpoint(path, name, config, artifacts[name])
            _finish_stage(timing_key, t0)

        stage = "input"
        stack_holder = {}

        def _stack():
            if "stack" not in stack_holder:
                stack_holder["stack"], stack_holder["ctf"] = _load_inputs(config)
            return stack_holder["stack"], stack_holder["ctf"]

        _run_stage("preprocess", "preprocess", lambda: _stage_preprocess(config, *_stack()))
        images = artifacts["preprocess"]["images"]

        _run_stage("spca", "sPCA", lambda: _stage_spca(config, images))
        coeffs = spca.SteerableCoeffs(
            coeffs=artifacts["spca"]["coeffs"],
            freqs=artifacts["spca"]["freqs"],
            residuals=artifacts["spca"]["residuals"],
        )

        _run_stage("neighbors", "NN", lambda: _stage_neighbors(config, coeffs))
        nb = artifacts["neighbors"]
        table = NeighborTable(
            seeds=nb["seeds"], neighbors=nb["neighbors"], corr=nb["corr"],
            angle=nb["angle"], reflected=nb["reflected"],
            n_images=coeffs.n_images, n_theta=config.n_theta,
            class_size=config.class_size,
        )

        _run_stage("sync", "sync", lambda: _stage_sync(config, coeffs, table))
        selection = artifacts["sync"]

        stage = "em"
        t0 = time.perf_counter()
        if config.em_on_raw and "raw_flipped" in artifacts["preprocess"]:
            em_images = artifacts["preprocess"]["raw_flipped"]
        else:
            em_images = images
        em_out = _stage_em(config, em_images, selection)
        _finish_stage("EM", t0)

        stage = "output"
        averages_path = out / "averages.mrcs"
        formats.write_mrc_stack(
            formats.MrcStack(data=em_out["averages"], pixel_size=1.0), averages_path
        )
        grades_path = out / "grades.txt"
        write_grade_report(grades_path, selection)
        manifest["outputs"] = [str(averages_path), str(grades_path)]

        timings["total"] = time.perf_counter() - t_total
        timing_path = out / "timing.txt"
        write_timing_report(timing_path, timings)
        manifest["outputs"].append(str(timing_path))
        manifest["status"] = "ok"
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

        return PipelineResult(
            out_dir=str(out),
            averages_path=str(averages_path),
            grades_path=str(grades_path),
            timing_path=str(timing_path),
            timings=timings,
            n_kept=len(selection["kept_order"]),
        )
    except (InputError, formats.FormatError, CheckpointError):
        raise
    except Exception as exc:
        manifest["status"] = f"failed at stage '{stage}': {exc}"
        try:
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        except OSError:
            pass
        raise StageFailure(stage, str(exc)) from exc


def resume(config: PipelineConfig) -> PipelineResult:
    """Restart from the deepest valid stage checkpoint under config.out_dir."""
    return run_pipeline(config, resume_run=True)
