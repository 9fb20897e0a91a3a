"""Pipeline stages: phantoms -> preprocess -> train -> sample -> evaluate -> report.

Each stage writes into its own output directory and finishes by writing a
MANIFEST.json that records the stage config, its hash, the tool version and
the SHA-256 of every file the stage produced. Nothing time- or
host-dependent is recorded, so identical configs give identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .denoiser import (
    Checkpoint, TrainConfig, load_checkpoint, predict_noise, save_checkpoint, train,
)
from .diffusion import generate_batch
from .encoding import DualViewPair, ThirdChannelMode, consistency_residual, decode, encode
from .imageio import GrayImage, NetpbmError, RgbImage, read_pgm, read_ppm, write_pgm, write_ppm
from .metrics import DegenerateHistogramError, pair_consistency
from .phantom import SpecRanges, draw_specs, generate_dataset, generate_pair, load_manifest
from .preprocess import (
    Laterality, ReferenceCdf, build_reference_cdf, histogram_match, load_default_reference,
    mirror_if_left, normalize_max, percentile_normalize,
)
from .report import MISSING, render_table, render_table1, render_table2
from .stats import ComparisonResult, DescriptiveStats, Significance, compare, describe

log = logging.getLogger(__name__)

MANIFEST = "MANIFEST.json"
DENSITY_BINS = 50


class PipelineError(RuntimeError):
    """A stage cannot run with the inputs it was given."""


# -- configuration -------------------------------------------------------------

@dataclass
class RunConfig:
    """Every knob of a desk-scale run; TrainConfig fields are nested under ``train``.

    Defaults are the desk experiment: 10 epochs at 64 px, 1000 training
    pairs, 200 samples scored against 500 held-out pairs.
    """

    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))
    n_train: int = 1000
    n_real: int = 500
    n_synth: int = 200
    phantom_seed: int = 1
    heldout_seed: int = 2
    sample_seed: int = 0
    sample_batch: int = 25
    keep_largest: bool = True
    artifact_rate: float = 0.06

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.n_real < 2 or self.n_synth < 2 or self.n_train < 1:
            raise ValueError("evaluation counts must be at least 2")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir, stage: str, config: dict, inputs: dict | None = None, extra: dict | None = None) -> dict:
    out = Path(out_dir)
    files = {p.relative_to(out).as_posix(): _sha256(p)
             for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST}
    manifest = {
        "stage": stage,
        "tool": "dualview",
        "tool_version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": inputs or {},
        "outputs": files,
    }
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_stage_manifest(d) -> dict:
    path = Path(d) / MANIFEST
    if not path.exists():
        raise PipelineError(f"{d} has no {MANIFEST}; run the producing stage first")
    return json.loads(path.read_text())


def _input_digest(d) -> str:
    """Digest of a stage directory's manifest, used to chain provenance."""
    path = Path(d) / MANIFEST
    return _sha256(path) if path.exists() else ""


# -- reference CDF -------------------------------------------------------------

REFERENCE_SEED = 20231
REFERENCE_PAIRS = 50


def reference_from_phantoms(n_pairs: int = REFERENCE_PAIRS, seed: int = REFERENCE_SEED,
                            ranges: SpecRanges = SpecRanges(), bins: int = 256) -> ReferenceCdf:
    """Reference CDF pooled over 2*n_pairs max-normalized phantom views."""
    views = []
    for spec, pair_seed in draw_specs(n_pairs, ranges, seed):
        pair = generate_pair(spec, pair_seed)
        views += [normalize_max(pair.cc), normalize_max(pair.mlo)]
    return build_reference_cdf(views, bins)


def _reference(path) -> ReferenceCdf:
    return ReferenceCdf.load(path) if path else load_default_reference()


# -- stages ---------------------------------------------------------------------

def cmd_phantoms(out_dir, n: int, seed: int, image_size: int = 64, artifact_rate: float = 0.06) -> dict:
    ranges = dataclasses.replace(SpecRanges(), image_size=image_size, artifact_rate=artifact_rate)
    try:
        generate_dataset(n, ranges, seed, out_dir)
    except OSError as exc:
        raise PipelineError(f"cannot write phantom dataset to {out_dir}: {exc}") from exc
    config = {"n": n, "seed": seed, "image_size": image_size, "artifact_rate": artifact_rate}
    return write_manifest(out_dir, "phantoms", config)


def _on_16bit_grid(img: GrayImage) -> GrayImage:
    # snapping views to the file grid before encoding makes the stored third
    # channel an exact integer function of the stored red and green samples
    return GrayImage(np.floor(img.data * 65535 + 0.5) / 65535)


def preprocess_pair(pair: DualViewPair, side: Laterality, ref: ReferenceCdf) -> DualViewPair:
    """normalize to max 1 -> mirror left views -> histogram-match each view."""
    views = []
    for view in (pair.cc, pair.mlo):
        view = mirror_if_left(normalize_max(view), side)
        views.append(_on_16bit_grid(histogram_match(view, ref)))
    return DualViewPair(*views)


def _load_phantom_pairs(data_dir):
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise PipelineError(f"{data_dir} has no manifest.json")
    manifest = load_manifest(data_dir)
    for entry in manifest["pairs"]:
        pair = DualViewPair(read_pgm(data_dir / entry["cc"]), read_pgm(data_dir / entry["mlo"]))
        yield entry, pair


def cmd_preprocess(data_dir, out_dir, mode: ThirdChannelMode, reference=None) -> dict:
    ref = _reference(reference)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    provenance = []
    for entry, pair in _load_phantom_pairs(data_dir):
        side = Laterality(entry.get("laterality", "R"))
        img = encode(preprocess_pair(pair, side, ref), mode)
        name = f"{entry['id']}.ppm"
        write_ppm(img, out / name)
        provenance.append({"id": entry["id"], "file": name, "cc": entry["cc"], "mlo": entry["mlo"],
                           "laterality": side.value,
                           "steps": ["normalize_max", "mirror_if_left", "histogram_match", f"encode:{mode.value}"]})
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2) + "\n")
    config = {"mode": mode.value, "reference": "bundled" if reference is None else "custom",
              "reference_sha256": hashlib.sha256(ref.to_json().encode()).hexdigest()}
    return write_manifest(out, "preprocess", config, {"dataset": _input_digest(data_dir)},
                          {"kind": "encoded-corpus", "mode": mode.value, "percentile_normalized": False})


def load_encoded_corpus(corpus_dir) -> tuple[list[str], np.ndarray]:
    files = sorted(Path(corpus_dir).glob("*.ppm"))
    if not files:
        raise PipelineError(f"no PPM files in {corpus_dir}")
    return [f.stem for f in files], np.stack([read_ppm(f).data for f in files])


def _loss_trace_csv(losses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, v in enumerate(losses, 1):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


def cmd_train(corpus_dir, out_dir, cfg: TrainConfig, resume=None) -> dict:
    corpus_manifest = read_stage_manifest(corpus_dir)
    if corpus_manifest.get("mode") and corpus_manifest["mode"] != cfg.third_channel_mode:
        log.warning("corpus mode %s differs from config mode %s; using the corpus mode",
                    corpus_manifest["mode"], cfg.third_channel_mode)
        cfg = dataclasses.replace(cfg, third_channel_mode=corpus_manifest["mode"])
    _, data = load_encoded_corpus(corpus_dir)
    if data.shape[2:] != (cfg.image_size, cfg.image_size):
        raise PipelineError(f"corpus images are {data.shape[2:]}, config expects {cfg.image_size}px")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = {"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end,
                "sigma_kind": cfg.sigma_kind, "kind": "linear"}

    def checkpoint(epoch, result, name):
        save_checkpoint(out / name, Checkpoint(result.params, schedule, cfg.to_dict(), epoch,
                                               result.state, result.losses))

    def on_epoch_end(epoch, result):
        log.info("epoch %d/%d loss %.6f", epoch, cfg.epochs, result.losses[-1])
        if epoch in cfg.checkpoint_epochs:
            checkpoint(epoch, result, f"epoch_{epoch:03d}.mrgb")

    kwargs = {}
    if resume is not None:
        ck = load_checkpoint(resume)
        kwargs = dict(params=ck.params, state=ck.adam, start_epoch=ck.epoch, losses=ck.losses)
    result = train(data, cfg, on_epoch_end=on_epoch_end, **kwargs)
    checkpoint(cfg.epochs, result, "final.mrgb")
    (out / "loss_trace.csv").write_text(_loss_trace_csv(result.losses))
    return write_manifest(out, "train", cfg.to_dict(), {"corpus": _input_digest(corpus_dir)},
                          {"losses": [float(x) for x in result.losses]})


def cmd_sample(checkpoint_path, out_dir, n: int, seed: int, batch: int = 25) -> dict:
    ck = load_checkpoint(checkpoint_path)
    sched = ck.noise_schedule()
    size = int(ck.train_config["image_size"])
    mode = ck.train_config.get("third_channel_mode", "absdiff")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    denoiser = lambda x, t: predict_noise(ck.params, x, t)
    for start in range(0, n, batch):
        idx = list(range(start, min(n, start + batch)))
        imgs = generate_batch(denoiser, sched, (3, size, size), [[seed, i] for i in idx])
        for i, raw in zip(idx, imgs):
            img = percentile_normalize(RgbImage(raw), 99)
            pair = decode(img)
            write_ppm(img, out / f"sample_{i:05d}.ppm")
            write_pgm(pair.cc, out / f"sample_{i:05d}_cc.pgm")
            write_pgm(pair.mlo, out / f"sample_{i:05d}_mlo.pgm")
        log.info("sampled %d/%d", idx[-1] + 1, n)
    config = {"n": n, "seed": seed, "batch": batch, "checkpoint_sha256": _sha256(Path(checkpoint_path)),
              "epoch": ck.epoch}
    return write_manifest(out, "sample", config, {},
                          {"kind": "encoded-corpus", "mode": mode, "percentile_normalized": True})


# -- evaluation -----------------------------------------------------------------

@dataclass
class CorpusScores:
    label: str
    samples: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    residual: float | None = None

    @property
    def iou(self):
        return np.array([s.iou for s in self.samples])

    @property
    def dsc(self):
        return np.array([s.dsc for s in self.samples])


def _score(label, items, keep_largest, mode=None) -> CorpusScores:
    scores = CorpusScores(label)
    residuals = []
    for sid, get_img in items:
        try:
            img = get_img()
        except (NetpbmError, OSError, ValueError) as exc:
            log.warning("skipping unreadable %s: %s", sid, exc)
            scores.skipped.append({"id": sid, "reason": "unreadable"})
            continue
        if mode is not None:
            residuals.append(consistency_residual(img, mode))
        try:
            scores.samples.append(pair_consistency(decode(img), keep_largest, sid))
        except DegenerateHistogramError:
            log.warning("skipping degenerate %s", sid)
            scores.skipped.append({"id": sid, "reason": "degenerate"})
    if residuals:
        scores.residual = float(np.mean(residuals))
    return scores


def score_corpus(corpus_dir, label: str, keep_largest: bool, reference=None) -> CorpusScores:
    """Score a phantom dataset (preprocessed on the fly) or an RGB corpus.

    Every RGB image is 99th-percentile normalized before masks are taken,
    unless its producing stage already did so.
    """
    corpus_dir = Path(corpus_dir)
    if (corpus_dir / "manifest.json").exists():
        ref = _reference(reference)
        manifest = load_manifest(corpus_dir)

        def loader(entry):
            def get():
                pair = DualViewPair(read_pgm(corpus_dir / entry["cc"]), read_pgm(corpus_dir / entry["mlo"]))
                side = Laterality(entry.get("laterality", "R"))
                return percentile_normalize(encode(preprocess_pair(pair, side, ref), ThirdChannelMode.ZERO))
            return get

        items = [(e["id"], loader(e)) for e in manifest["pairs"]]
        return _score(label, items, keep_largest)

    stage = read_stage_manifest(corpus_dir)
    normalized = bool(stage.get("percentile_normalized"))
    mode = ThirdChannelMode(stage["mode"]) if stage.get("mode") else None
    files = sorted(corpus_dir.glob("*.ppm"))
    if not files:
        raise PipelineError(f"no PPM files in {corpus_dir}")

    def loader(path):
        def get():
            img = read_ppm(path)
            return img if normalized else percentile_normalize(img)
        return get

    return _score(label, [(f.stem, loader(f)) for f in files], keep_largest, mode)


def _samples_csv(scores: CorpusScores) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "iou", "dsc", "warnings"])
    for s in scores.samples:
        w.writerow([s.source_id, repr(s.iou), repr(s.dsc), ";".join(s.warnings)])
    for s in scores.skipped:
        w.writerow([s["id"], "", "", s["reason"]])
    return buf.getvalue()


def _density_csv(corpora: list[CorpusScores]) -> str:
    edges = np.linspace(0.0, 1.0, DENSITY_BINS + 1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "dataset", "bin_lo", "bin_hi", "density"])
    for metric in ("iou", "dsc"):
        for c in corpora:
            vals = getattr(c, metric)
            dens = np.histogram(vals, bins=edges, density=True)[0] if vals.size else np.zeros(DENSITY_BINS)
            for lo, hi, d in zip(edges[:-1], edges[1:], dens):
                w.writerow([metric, c.label, f"{lo:.2f}", f"{hi:.2f}", repr(float(d))])
    return buf.getvalue()


def evaluate_scores(real: CorpusScores, synth: CorpusScores) -> dict:
    if not real.samples or not synth.samples:
        raise PipelineError("both corpora need at least one scorable pair")
    result = {"real_label": real.label, "synth_label": synth.label, "corpora": {}, "comparison": {}}
    for c in (real, synth):
        result["corpora"][c.label] = {"n_scored": len(c.samples), "skipped": c.skipped,
                                      "consistency_residual": c.residual}
    for metric in ("iou", "dsc"):
        ref_stats = describe(getattr(real, metric))
        result["corpora"][real.label][metric] = ref_stats.to_dict()
        result["corpora"][synth.label][metric] = describe(getattr(synth, metric), ref_stats.mean).to_dict()
        result["comparison"][metric] = compare(getattr(real, metric), getattr(synth, metric)).to_dict()
    return result


def comparison_from_dict(d: dict) -> ComparisonResult:
    return ComparisonResult(d["emd"], d["ks_d"], d["p_value"], Significance(d["significance"]), d["unmapped_gap"])


def cmd_evaluate(real_dir, synth_dir, out_dir, keep_largest: bool = True, label: str | None = None,
                 reference=None) -> dict:
    real = score_corpus(real_dir, "Real", keep_largest, reference)
    if label is None:
        stage = read_stage_manifest(synth_dir) if (Path(synth_dir) / MANIFEST).exists() else {}
        label = ThirdChannelMode(stage["mode"]).model_name if stage.get("mode") else "Synthetic"
    synth = score_corpus(synth_dir, label, keep_largest, reference)
    result = evaluate_scores(real, synth)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_sample_real.csv").write_text(_samples_csv(real))
    (out / "per_sample_synth.csv").write_text(_samples_csv(synth))
    (out / "density.csv").write_text(_density_csv([real, synth]))
    (out / "evaluation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    (out / "tables.txt").write_text(_eval_tables(result) + "\n")
    config = {"keep_largest": keep_largest, "label": label}
    return write_manifest(out, "evaluate", config,
                          {"real": _input_digest(real_dir), "synth": _input_digest(synth_dir)})


def _eval_tables(result: dict) -> str:
    real, synth = result["real_label"], result["synth_label"]
    parts = []
    for metric, title in (("iou", "IoU"), ("dsc", "DSC")):
        rows = [(lbl, DescriptiveStats.from_dict(result["corpora"][lbl][metric])) for lbl in (real, synth)]
        parts.append(render_table1(title, rows))
    for metric, title in (("iou", "IoU"), ("dsc", "DSC")):
        parts.append(render_table2(title, [(synth, comparison_from_dict(result["comparison"][metric]))]))
    return "\n\n".join(parts)


# -- report ---------------------------------------------------------------------

def build_report(evals: list[tuple[str, Path]]) -> dict:
    """Merge several evaluation directories (one per model) into one summary."""
    report = {"tool_version": __version__, "real": None, "models": []}
    for label, d in evals:
        path = Path(d) / "evaluation.json"
        if not path.exists():
            report["models"].append({"label": label, "missing": True})
            continue
        ev = json.loads(path.read_text())
        synth = ev["corpora"][ev["synth_label"]]
        if report["real"] is None:
            real = ev["corpora"][ev["real_label"]]
            report["real"] = {"label": ev["real_label"], "iou": real["iou"], "dsc": real["dsc"]}
        report["models"].append({
            "label": label,
            "missing": False,
            "iou": synth["iou"],
            "dsc": synth["dsc"],
            "comparison": ev["comparison"],
            "consistency_residual": synth.get("consistency_residual"),
            "skipped": len(synth["skipped"]),
        })
    return report


def render_report(report: dict) -> str:
    parts = []
    for metric, title in (("iou", "IoU"), ("dsc", "DSC")):
        rows = []
        if report["real"] is not None:
            rows.append((report["real"]["label"], DescriptiveStats.from_dict(report["real"][metric])))
        for m in report["models"]:
            rows.append((m["label"], None if m["missing"] else DescriptiveStats.from_dict(m[metric])))
        parts.append(render_table1(title, rows))
    for metric, title in (("iou", "IoU"), ("dsc", "DSC")):
        rows = [(m["label"], None if m["missing"] else comparison_from_dict(m["comparison"][metric]))
                for m in report["models"]]
        parts.append(render_table2(title, rows))
    rows = []
    for m in report["models"]:
        r = None if m["missing"] else m["consistency_residual"]
        rows.append([m["label"], MISSING] if m["missing"] else [m["label"], "N/A" if r is None else f"{r:.4f}"])
    parts.append("Consistency residual (mean |b - f(r, g)|)\n" + render_table(("Dataset", "Residual"), rows))
    return "\n\n".join(parts)


def cmd_report(evals: list[tuple[str, Path]], out_dir) -> dict:
    if not evals:
        raise PipelineError("no evaluation directories given")
    report = build_report(evals)
    if all(m["missing"] for m in report["models"]):
        raise PipelineError("none of the evaluation directories exist")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(render_report(report) + "\n")
    return write_manifest(out, "report", {"models": [l for l, _ in evals]},
                          {l: _input_digest(d) for l, d in evals})


# -- whole run ------------------------------------------------------------------

def run_pipeline(run_dir, cfg: RunConfig) -> dict:
    """All stages for one third-channel mode under ``run_dir``."""
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    mode = ThirdChannelMode(t.third_channel_mode)
    cmd_phantoms(run / "phantoms", cfg.n_train, cfg.phantom_seed, t.image_size, cfg.artifact_rate)
    cmd_phantoms(run / "heldout", cfg.n_real, cfg.heldout_seed, t.image_size, cfg.artifact_rate)
    cmd_preprocess(run / "phantoms", run / "encoded", mode)
    cmd_train(run / "encoded", run / "train", t)
    cmd_sample(run / "train" / "final.mrgb", run / "samples", cfg.n_synth, cfg.sample_seed, cfg.sample_batch)
    cmd_evaluate(run / "heldout", run / "samples", run / "eval", cfg.keep_largest, mode.model_name)
    cmd_report([(mode.model_name, run / "eval")], run / "report")
    stages = {name: _input_digest(run / name)
              for name in ("phantoms", "heldout", "encoded", "train", "samples", "eval", "report")}
    return write_run_manifest(run, cfg, stages)


def write_run_manifest(run: Path, cfg: RunConfig, stages: dict) -> dict:
    config = cfg.to_dict()
    manifest = {
        "tool": "dualview",
        "tool_version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        "stages": stages,
        "notes": ["real (held-out) pairs go through the same preprocessing chain as training pairs "
                  "and the same 99th-percentile normalization as samples before mask extraction"],
    }
    (run / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
