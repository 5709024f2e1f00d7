"""End-to-end loop: frontal fit, novel renders, hybrid inversion, back-view
synthesis and alignment, with JSON checkpoints at every stage boundary."""
from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .asa import AlignmentConfig, SupervisionView, optimize_alignment, write_trace_csv
from .geometry import Camera, MeshParams, SimilarityTransform, camera_from_orbit, load_mesh
from .image import Image, save_png
from .metrics import psnr
from .oracle import (
    GeneratorParams,
    InversionConfig,
    build_hybrid_set,
    invert,
    sample_back_cameras,
    synthesize_back_views,
)
from .scene import BACKGROUND, CAMERA_RADIUS, FOCAL, Subject, frontal_cameras, make_subject
from .splat import SplatCloud, bind_kernels, globalize, render

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
STAGES = ("fit", "novel", "invert", "synthesize", "align")
PROFILES = {
    "desk": {"real_resolution": (128, 128), "pseudo_resolution": (128, 128)},
    "capture": {"real_resolution": (802, 550), "pseudo_resolution": (512, 512)},
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(ValueError):
    """A checkpoint file could not be parsed."""


class UnsupportedVersionError(CheckpointError):
    """A checkpoint was written by an incompatible format version."""


class StageError(RuntimeError):
    def __init__(self, stage, round_index, cause):
        super().__init__(f"stage '{stage}' (round {round_index}) failed: {cause}")
        self.stage = stage
        self.round_index = round_index


# -- configuration ----------------------------------------------------------------------

@dataclass
class CameraConfig:
    count: int = 16
    span: float = 120.0
    elevation: float = 0.0
    radius: float = CAMERA_RADIUS
    focal: float = FOCAL
    profile: str = "desk"
    real_resolution: tuple | None = None
    pseudo_resolution: tuple | None = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown resolution profile {self.profile!r}")
        base = PROFILES[self.profile]
        self.real_resolution = tuple(self.real_resolution or base["real_resolution"])
        self.pseudo_resolution = tuple(self.pseudo_resolution or base["pseudo_resolution"])
        if self.count < 1:
            raise ConfigError("cameras.count must be >= 1")
        if not 0.0 <= self.span <= 360.0:
            raise ConfigError("cameras.span must lie in [0, 360]")
        if min(self.real_resolution + self.pseudo_resolution) <= 0:
            raise ConfigError("resolutions must be positive")
        if self.radius <= 0:
            raise ConfigError("cameras.radius must be positive")


@dataclass
class FitConfig:
    steps: int = 400
    views_per_step: int | None = 4
    lr_phi: float = 0.005
    lambda_flame: float = 0.5
    tracking_noise: float = 0.05


@dataclass
class NovelConfig:
    azimuths: list = field(default_factory=lambda: [60.0, -60.0])
    elevations: list = field(default_factory=lambda: [0.0, 0.0])

    def __post_init__(self):
        if len(self.azimuths) != len(self.elevations):
            raise ConfigError("novel.azimuths and novel.elevations must have the same length")

    def cameras(self, cam_cfg: CameraConfig) -> list:
        return [camera_from_orbit(float(a) % 360.0, float(e), cam_cfg.radius, focal=cam_cfg.focal,
                                  resolution=cam_cfg.real_resolution)
                for a, e in zip(self.azimuths, self.elevations)]


@dataclass
class SynthesisConfig:
    count: int = 6
    elevation: float = 0.0
    random: bool = False
    hook: list = field(default_factory=list)


@dataclass
class EvalConfig:
    holdout_azimuths: list = field(default_factory=lambda: [180.0])


@dataclass
class SceneConfig:
    seed: int = 0
    rounds: int = 1
    mesh: str | None = None
    blendshapes: str | None = None
    subject: str | None = None
    cameras: CameraConfig = field(default_factory=CameraConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    novel: NovelConfig = field(default_factory=NovelConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    alignment: AlignmentConfig = field(default_factory=lambda: AlignmentConfig(
        max_steps=300, views_per_step=2, pseudo_per_step=2, background=BACKGROUND))
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: str = "."

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        for name in ("mesh", "blendshapes", "subject"):
            path = getattr(self, name)
            if path is not None and not self.resolve(path).exists():
                raise ConfigError(f"{name} path does not exist: {self.resolve(path)}")
        if (self.mesh is None) != (self.blendshapes is None):
            raise ConfigError("mesh and blendshapes must be given together")

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_SECTIONS = {
    "cameras": CameraConfig, "fit": FitConfig, "novel": NovelConfig, "inversion": InversionConfig,
    "synthesis": SynthesisConfig, "alignment": AlignmentConfig, "eval": EvalConfig,
}


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(data: dict, base_dir=".") -> SceneConfig:
    data = dict(data)
    kwargs = {"base_dir": str(base_dir)}
    for name, cls in _SECTIONS.items():
        section = data.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        if name == "alignment":
            section = {"views_per_step": 2, "pseudo_per_step": 2, "max_steps": 300, "background": BACKGROUND,
                       **section}
            if "background" in section:
                section["background"] = tuple(section["background"])
        kwargs[name] = _build(cls, section, name)
    scene = data.pop("scene", {})
    for key in ("mesh", "blendshapes", "subject"):
        if key in scene:
            kwargs[key] = scene.pop(key)
    if scene:
        raise ConfigError(f"unknown keys in [scene]: {sorted(scene)}")
    for key in ("seed", "rounds"):
        if key in data:
            kwargs[key] = int(data.pop(key))
    if data:
        raise ConfigError(f"unknown top-level keys: {sorted(data)}")
    return SceneConfig(**kwargs)


def load_config(path) -> SceneConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, base_dir=path.parent)


# -- subject persistence -------------------------------------------------------------------

def subject_to_dict(subject: Subject) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "truth": subject.truth.to_dict(),
        "phi_true": subject.phi_true.tolist(),
        "generator": subject.generator.to_dict(),
        "generator_frame": subject.generator_frame.to_dict(),
        "w_true": subject.w_true.tolist(),
        "background": list(subject.background),
    }


def load_subject(cfg: SceneConfig) -> Subject:
    """The bundled subject, or one saved by ``make-scene``, with the configured mesh."""
    if cfg.subject is None:
        subject = make_subject()
    else:
        data = _read_json(cfg.resolve(cfg.subject))
        base = make_subject()
        subject = Subject(base.mesh, SplatCloud.from_dict(data["truth"]), np.asarray(data["phi_true"], float),
                          GeneratorParams.from_dict(data["generator"]),
                          SimilarityTransform.from_dict(data["generator_frame"]),
                          np.asarray(data["w_true"], float), tuple(data["background"]))
    if cfg.mesh is not None:
        mesh = load_mesh(cfg.resolve(cfg.mesh), cfg.resolve(cfg.blendshapes))
        if not np.array_equal(mesh.triangles, subject.truth.triangles):
            raise ConfigError("mesh topology does not match the subject")
        subject.mesh = mesh
    return subject


# -- checkpoints ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    round_index: int
    stage: str  # last completed stage
    cloud: SplatCloud
    transform: SimilarityTransform
    phi: np.ndarray
    phi_orig: np.ndarray
    generator: GeneratorParams
    rng_state: dict
    pseudo_cameras: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "round": self.round_index,
            "stage": self.stage,
            "cloud": self.cloud.to_dict(),
            "transform": self.transform.to_dict(),
            "phi": self.phi.tolist(),
            "phi_orig": self.phi_orig.tolist(),
            "generator": self.generator.to_dict(),
            "rng_state": self.rng_state,
            "pseudo_cameras": [c.to_dict() for c in self.pseudo_cameras],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported checkpoint format_version {version!r} "
                                          f"(this build reads version {FORMAT_VERSION})")
        if d.get("stage") not in STAGES:
            raise CheckpointError(f"unknown stage {d.get('stage')!r}")
        return cls(
            int(d["round"]), d["stage"], SplatCloud.from_dict(d["cloud"]), SimilarityTransform.from_dict(d["transform"]),
            np.asarray(d["phi"], dtype=np.float64), np.asarray(d["phi_orig"], dtype=np.float64),
            GeneratorParams.from_dict(d["generator"]), d["rng_state"],
            [Camera.from_dict(c) for c in d.get("pseudo_cameras", [])],
        )


def _read_json(path):
    text = Path(path).read_bytes().decode("utf-8", errors="replace")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise CheckpointError(f"{path}: {exc.msg} at byte {offset}") from None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(ckpt.to_dict(), separators=(",", ":")))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = _read_json(path)
    if not isinstance(data, dict):
        raise CheckpointError(f"{path}: expected a JSON object")
    try:
        return Checkpoint.from_dict(data)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc}") from None


# -- stages --------------------------------------------------------------------------------

def real_views(subject: Subject, cfg: SceneConfig) -> list:
    """Captured frontal views of the subject (rendered from its ground truth)."""
    cams = frontal_cameras(cfg.cameras.count, cfg.cameras.span, cfg.cameras.elevation,
                           cfg.cameras.real_resolution, cfg.cameras.focal, cfg.cameras.radius)
    return [(subject.render_truth(c), c) for c in cams]


def fit_config(cfg: SceneConfig, seed: int) -> AlignmentConfig:
    a = cfg.alignment
    return AlignmentConfig(
        lr0=a.lr0, lr_phi=cfg.fit.lr_phi, lr_kernels=dict(a.lr_kernels), max_steps=cfg.fit.steps,
        lambda_flame=cfg.fit.lambda_flame, lambda_pseudo=a.lambda_pseudo, w_l1=a.w_l1, w_ssim=a.w_ssim,
        train_scale=False, train_rotation=False, train_translation=False, train_phi=a.train_phi,
        views_per_step=cfg.fit.views_per_step, background=a.background, seed=seed,
    )


def frontal_fit(subject: Subject, views, phi: MeshParams, cfg: SceneConfig, seed: int):
    """Fit a freshly bound avatar to the captured views alone."""
    cloud = bind_kernels(subject.mesh.base_vertices, subject.mesh.triangles)
    sup = [SupervisionView(img, cam, "real") for img, cam in views]
    return optimize_alignment(cloud, subject.mesh, phi, sup, fit_config(cfg, seed))


def avatar_world(ckpt: Checkpoint, subject: Subject, xf=None):
    return globalize(ckpt.cloud, subject.mesh.eval(ckpt.phi), xf)


def render_avatar(ckpt: Checkpoint, subject: Subject, cam: Camera) -> Image:
    return render(avatar_world(ckpt, subject), cam, subject.background)


def holdout_cameras(cfg: SceneConfig) -> list:
    return [camera_from_orbit(float(a) % 360.0, 0.0, cfg.cameras.radius, focal=cfg.cameras.focal,
                              resolution=cfg.cameras.real_resolution) for a in cfg.eval.holdout_azimuths]


def holdout_metrics(ckpt: Checkpoint, subject: Subject, cfg: SceneConfig) -> dict:
    """Mean L1 and PSNR of the avatar against ground truth at the held-out azimuths."""
    l1, ps = [], []
    for cam in holdout_cameras(cfg):
        a, b = render_avatar(ckpt, subject, cam), subject.render_truth(cam)
        l1.append(float(np.mean(np.abs(a.rgb - b.rgb))))
        ps.append(psnr(a, b))
    return {"holdout_l1": float(np.mean(l1)), "holdout_psnr": float(np.mean(ps))}


@dataclass
class LoopResult:
    checkpoint: Checkpoint
    report: list  # (stage, metric, value)
    fit_checkpoint: Checkpoint | None = None


class _Writer:
    def __init__(self, out_dir):
        self.root = Path(out_dir) if out_dir is not None else None
        if self.root is not None:
            (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)

    def checkpoint(self, ckpt: Checkpoint):
        if self.root is None:
            return
        name = f"r{ckpt.round_index}_{STAGES.index(ckpt.stage)}_{ckpt.stage}.json"
        save_checkpoint(ckpt, self.root / "checkpoints" / name)

    def trace(self, trace, name):
        if self.root is not None:
            write_trace_csv(trace, self.root / name)

    def png(self, image, name):
        if self.root is not None:
            path = self.root / name
            path.parent.mkdir(parents=True, exist_ok=True)
            save_png(image, path)


def _next_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def run_loop(cfg: SceneConfig, out_dir=None, resume: Checkpoint | None = None, subject: Subject | None = None,
             stop_after: tuple | None = None) -> LoopResult:
    """Run every stage in order, checkpointing after each one.

    ``resume`` continues after the stage recorded in a checkpoint. ``stop_after``
    (``(round, stage)``) ends the run early, which is how partial runs are made.
    """
    subject = subject or load_subject(cfg)
    writer = _Writer(out_dir)
    views = real_views(subject, cfg)
    report = []
    fit_ckpt = None

    if resume is None:
        rng = np.random.default_rng(cfg.seed)
        noise = rng.normal(size=subject.mesh.num_params) * cfg.fit.tracking_noise
        phi = MeshParams(subject.phi_true + noise)
        try:
            res = frontal_fit(subject, views, phi, cfg, _next_seed(rng))
        except Exception as exc:
            raise StageError("fit", 0, exc) from exc
        ckpt = Checkpoint(0, "fit", res.cloud, SimilarityTransform.identity(), res.phi.copy(), phi.phi_orig.copy(),
                          subject.generator.copy(), rng.bit_generator.state)
        writer.checkpoint(ckpt)
        writer.trace(res.trace, "fit_loss.csv")
        report.append(("fit", "final_loss", res.best_loss))
        fit_ckpt = ckpt
    else:
        ckpt = resume
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        if ckpt.stage == "fit":
            fit_ckpt = ckpt
    if fit_ckpt is not None:
        for k, v in holdout_metrics(fit_ckpt, subject, cfg).items():
            report.append(("fit", k, v))

    schedule = stage_schedule(cfg.rounds)
    if (ckpt.round_index, ckpt.stage) not in schedule:
        raise CheckpointError(f"checkpoint stage {ckpt.stage!r} of round {ckpt.round_index} is outside this schedule")
    done = schedule.index((ckpt.round_index, ckpt.stage))
    renders = None
    if stop_after != (ckpt.round_index, ckpt.stage):
        for r, stage in schedule[done + 1:]:
            try:
                ckpt, renders = _run_stage(stage, r, ckpt, subject, cfg, views, rng, renders, writer, report)
            except (ConfigError, StageError):
                raise
            except Exception as exc:
                raise StageError(stage, r, exc) from exc
            writer.checkpoint(ckpt)
            if stop_after == (r, stage):
                break

    for k, v in holdout_metrics(ckpt, subject, cfg).items():
        report.append(("final", k, v))
    for cam in holdout_cameras(cfg):
        writer.png(render_avatar(ckpt, subject, cam), f"final_az{int(round(cam.azimuth)):03d}.png")
        if fit_ckpt is not None:
            writer.png(render_avatar(fit_ckpt, subject, cam), f"fit_az{int(round(cam.azimuth)):03d}.png")
    if writer.root is not None:
        save_checkpoint(ckpt, writer.root / "checkpoint.json")
        write_report(report, writer.root / "report.csv")
    return LoopResult(ckpt, report, fit_ckpt)


def stage_schedule(rounds: int) -> list:
    """Ordered ``(round, stage)`` pairs: the frontal fit, then four stages per round."""
    return [(0, "fit")] + [(r, stage) for r in range(rounds) for stage in STAGES[1:]]


def _replace(ckpt: Checkpoint, stage: str, round_index: int, rng, **changes) -> Checkpoint:
    values = {
        "round_index": round_index, "stage": stage, "cloud": ckpt.cloud, "transform": ckpt.transform,
        "phi": ckpt.phi, "phi_orig": ckpt.phi_orig, "generator": ckpt.generator,
        "rng_state": rng.bit_generator.state, "pseudo_cameras": ckpt.pseudo_cameras,
    }
    values.update(changes)
    return Checkpoint(**values)


def novel_renders(ckpt: Checkpoint, subject: Subject, cfg: SceneConfig) -> list:
    world = avatar_world(ckpt, subject)
    return [(render(world, cam, subject.background), cam) for cam in cfg.novel.cameras(cfg.cameras)]


def inversion_views(views, subject: Subject, cfg: SceneConfig, renders=()) -> tuple:
    """Captured views nearest the front plus avatar renders, with cameras moved
    into the generator's frame."""
    order = sorted(range(len(views)), key=lambda i: (abs((views[i][1].azimuth + 180.0) % 360.0 - 180.0), i))
    keep = sorted(order[:cfg.inversion.ori_views] if cfg.inversion.ori_views else order)
    ori = [(views[i][0], subject.generator_camera(views[i][1])) for i in keep]
    return ori, [(img, subject.generator_camera(cam)) for img, cam in renders]


def pseudo_cameras(cfg: SceneConfig, seed: int) -> list:
    s = cfg.synthesis
    return sample_back_cameras(s.count, s.elevation, cfg.cameras.radius, focal=cfg.cameras.focal,
                               resolution=cfg.cameras.pseudo_resolution, seed=seed if s.random else None)


def synthesize_pseudo_views(ckpt: Checkpoint, subject: Subject, cfg: SceneConfig) -> list:
    """Generator images at the checkpoint's back cameras, paired with the avatar-frame cameras."""
    gen_cams = [subject.generator_camera(c) for c in ckpt.pseudo_cameras]
    images = synthesize_back_views(ckpt.generator, gen_cams, hook=cfg.synthesis.hook or None)
    return [(img, cam) for (img, _), cam in zip(images, ckpt.pseudo_cameras)]


def _run_stage(stage, r, ckpt, subject, cfg, views, rng, renders, writer, report):
    if stage == "novel":
        renders = novel_renders(ckpt, subject, cfg)
        for i, (img, cam) in enumerate(renders):
            writer.png(img, f"round{r}/novel_{i:02d}.png")
        return _replace(ckpt, stage, r, rng), renders

    if stage == "invert":
        if renders is None:
            # resuming after the render stage; the renders are a pure function of the checkpoint
            renders = novel_renders(ckpt, subject, cfg)
        inv = InversionConfig(**{**asdict(cfg.inversion), "seed": _next_seed(rng)})
        ori, ren = inversion_views(views, subject, cfg, renders)
        gen, rep = invert(ckpt.generator, build_hybrid_set(ori, ren), inv)
        report.append((f"invert_r{r}", "initial_loss", rep.initial_loss))
        report.append((f"invert_r{r}", "final_loss", rep.final_loss))
        return _replace(ckpt, stage, r, rng, generator=gen), renders

    if stage == "synthesize":
        cams = pseudo_cameras(cfg, _next_seed(rng))
        return _replace(ckpt, stage, r, rng, pseudo_cameras=cams), renders

    if stage == "align":
        pseudo = synthesize_pseudo_views(ckpt, subject, cfg)
        for img, cam in pseudo:
            writer.png(img, f"round{r}/pseudo_az{int(round(cam.azimuth)):03d}.png")
        sup = [SupervisionView(img, cam, "real") for img, cam in views]
        sup += [SupervisionView(img, cam, "pseudo") for img, cam in pseudo]
        acfg = AlignmentConfig(**{**asdict(cfg.alignment), "seed": _next_seed(rng)})
        res = optimize_alignment(ckpt.cloud, subject.mesh, MeshParams(ckpt.phi, ckpt.phi_orig), sup, acfg,
                                 xf_init=ckpt.transform)
        writer.trace(res.trace, f"align_loss_r{r}.csv")
        report.append((f"align_r{r}", "final_loss", res.best_loss))
        return _replace(ckpt, stage, r, rng, cloud=res.cloud, transform=res.transform, phi=res.phi), renders

    raise ValueError(f"unknown stage {stage}")


def write_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "metric", "value"])
        for stage, metric, value in rows:
            writer.writerow([stage, metric, repr(float(value))])
