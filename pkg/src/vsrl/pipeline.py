"""Experiment orchestration: staged pipeline with artifact-based resumability
and the mean±std report (markdown + CSV + figures).

Stage order is fixed: sample → annotate → train-saliency → pretrain →
train-rl → eval-gen → report. A stage is skipped when its output artifacts
already exist, so rerunning a finished experiment only regenerates the
report.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotate import AnnotationStore, SampleStrategy, collect_rollout_frames, sample_frames
from .data import SaliencyMap, SaliencySource, load_frame, load_manifest, load_saliency, save_saliency
from .envs import make_env, oracle_depth, oracle_normals, oracle_saliency
from .fusion import FusionVariant
from .mae import MaeConfig, Modality, PretrainKind, PretrainMode, pretrain, save_mae
from .metrics import EvalRecord, mean_std, read_jsonl
from .perturb import PerturbConfig, PerturbKind, eval_generalization, make_gradient_clip
from .plots import plot_learning_curves, plot_summary_bars
from .rl import SacConfig
from .saliency import PredictorConfig, save_checkpoint, train_predictor
from .train import TrainConfig, load_agent, train_rl


@dataclass
class ExperimentConfig:
    env_id: str = "toy-reach"
    encoder: str = "cnn"  # cnn | mae
    variants: list[str] = field(default_factory=lambda: ["rgb", "rgb_s"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs/experiment"
    saliency_source: str = "oracle"  # oracle | predictor
    pool_size: int = 20
    rollout_steps: int = 200
    predictor: dict = field(default_factory=dict)
    mae: dict = field(default_factory=dict)
    rl: dict = field(default_factory=dict)
    perturbations: list[dict] = field(default_factory=list)
    eval_episodes: int = 10

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for v in self.variants:
            FusionVariant(v)  # validates the name
        if self.encoder not in ("cnn", "mae"):
            raise ValueError(f"unknown encoder {self.encoder!r}")

    def to_json(self) -> dict:
        return json.loads(json.dumps(self.__dict__))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        payload = json.loads(Path(path).read_text())
        return cls(**payload)


def data_root(config: ExperimentConfig) -> Path:
    env_root = os.environ.get("VSRL_DATA_ROOT")
    base = Path(env_root) if env_root else Path(config.output_dir)
    return base


class StageError(RuntimeError):
    pass


def _train_config(config: ExperimentConfig, variant: str, seed: int, root: Path) -> TrainConfig:
    rl_kwargs = dict(config.rl)
    sac_kwargs = rl_kwargs.pop("sac", {})
    needs_sal = variant != "rgb"
    predictor_ckpt = str(root / "saliency_ckpt.bin") if config.saliency_source == "predictor" else None
    return TrainConfig(
        env_id=config.env_id,
        encoder_kind=config.encoder,
        fusion=FusionVariant(variant),
        saliency_source=(config.saliency_source if needs_sal else "none"),
        predictor_ckpt=predictor_ckpt if needs_sal else None,
        mae_ckpt=str(root / "mae_ckpt.bin") if config.encoder == "mae" else None,
        sac=SacConfig(seed=seed, **sac_kwargs),
        **rl_kwargs,
    )


def run_pipeline(config: ExperimentConfig, log_fn=print) -> dict:
    """Execute pending stages; returns {stage_name: executed_bool} plus outputs."""
    root = data_root(config)
    root.mkdir(parents=True, exist_ok=True)
    executed: dict[str, bool] = {}
    resolved = root / "config.resolved.json"
    resolved.write_text(json.dumps(config.to_json(), indent=2))

    # -- stage: sample ------------------------------------------------------
    store = AnnotationStore(root)
    pool_file = root / "pool" / "pool.json"
    if pool_file.exists():
        executed["sample"] = False
    else:
        env = make_env(config.env_id)
        frames, boundaries = collect_rollout_frames(env, config.rollout_steps, seed=0)
        pool = sample_frames(frames, config.pool_size, SampleStrategy.UNIFORM, seed=0)
        store.init_pool(pool)
        executed["sample"] = True
        log_fn(f"[sample] pooled {config.pool_size} frames")

    # -- stage: annotate (external unless oracle saliency stands in) ---------
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        executed["annotate"] = False
    elif config.saliency_source == "oracle":
        _synthesize_oracle_annotations(config, store, root)
        executed["annotate"] = True
        log_fn("[annotate] oracle saliency substituted for the human step")
    else:
        raise StageError(
            "stage annotate: manifest.json missing — run the annotation UI "
            "(vsrl annotate-serve) and POST /export before resuming"
        )

    # -- stage: train-saliency -----------------------------------------------
    sal_ckpt = root / "saliency_ckpt.bin"
    if config.saliency_source == "predictor":
        if sal_ckpt.exists():
            executed["train-saliency"] = False
        else:
            if not manifest_path.exists():
                raise StageError("stage train-saliency: manifest.json required")
            _train_saliency_stage(config, manifest_path, sal_ckpt)
            executed["train-saliency"] = True
            log_fn("[train-saliency] checkpoint written")
    else:
        executed["train-saliency"] = False

    # -- stage: pretrain ------------------------------------------------------
    mae_ckpt = root / "mae_ckpt.bin"
    if config.encoder == "mae":
        if mae_ckpt.exists():
            executed["pretrain"] = False
        else:
            if not manifest_path.exists():
                raise StageError("stage pretrain: manifest.json required")
            _pretrain_stage(config, manifest_path, mae_ckpt)
            executed["pretrain"] = True
            log_fn("[pretrain] checkpoint written")
    else:
        executed["pretrain"] = False

    # -- stage: train-rl -------------------------------------------------------
    metrics_dir = root / "metrics"
    executed["train-rl"] = False
    for variant in config.variants:
        for seed in config.seeds:
            run_name = f"{variant}_seed{seed}"
            metrics_path = metrics_dir / f"train_{run_name}.jsonl"
            ckpt_path = root / "agents" / f"{run_name}.bin"
            if metrics_path.exists() and ckpt_path.exists():
                continue
            tc = _train_config(config, variant, seed, root)
            if tc.saliency_source == "predictor" and not sal_ckpt.exists():
                raise StageError("stage train-rl: train-saliency output required (saliency_ckpt.bin)")
            if config.encoder == "mae" and not mae_ckpt.exists():
                raise StageError("stage train-rl: pretrain output required (mae_ckpt.bin)")
            env = make_env(config.env_id)
            log_fn(f"[train-rl] {run_name}: {tc.total_steps} steps")
            train_rl(env, tc, metrics_path=metrics_path, ckpt_path=ckpt_path)
            executed["train-rl"] = True

    # -- stage: eval-gen --------------------------------------------------------
    executed["eval-gen"] = False
    if config.perturbations:
        for variant in config.variants:
            for seed in config.seeds:
                run_name = f"{variant}_seed{seed}"
                out_path = metrics_dir / f"gen_{run_name}.jsonl"
                if out_path.exists():
                    continue
                ckpt_path = root / "agents" / f"{run_name}.bin"
                if not ckpt_path.exists():
                    raise StageError(f"stage eval-gen: train-rl output required ({ckpt_path.name})")
                env = make_env(config.env_id)
                agent, tc = load_agent(ckpt_path, env)
                configs = [_perturb_config(p) for p in config.perturbations]
                report = eval_generalization(agent, env, configs, config.eval_episodes, tc, seed=seed)
                from .metrics import write_jsonl

                write_jsonl(report.records, out_path)
                executed["eval-gen"] = True
                log_fn(f"[eval-gen] {run_name}")

    # -- stage: report ------------------------------------------------------------
    summary = report(metrics_dir, root / "report")
    executed["report"] = True
    log_fn(f"[report] {summary['markdown']}")
    return {"executed": executed, "root": str(root), "report": summary}


def _synthesize_oracle_annotations(config: ExperimentConfig, store: AnnotationStore, root: Path) -> None:
    # Re-derive oracle maps for pooled frames: pool ids are positional, so we
    # regenerate the same rollout and look states up by pixel identity.
    env = make_env(config.env_id)
    frames, _ = collect_rollout_frames(env, config.rollout_steps, seed=0)
    env2 = make_env(config.env_id)
    states = _rollout_states(env2, config.rollout_steps, seed=0)
    by_bytes = {f.pixels.tobytes(): s for f, s in zip(frames, states)}
    sal_dir = root / "oracle_saliency"
    records = []
    from .data import DatasetManifest, ManifestRecord, Split, save_manifest

    for frame_id in store.pool_ids():
        frame = load_frame(store.frame_path(frame_id))
        state = by_bytes[frame.pixels.tobytes()]
        sal = oracle_saliency(state)
        sal_path = sal_dir / f"{frame_id}.png"
        save_saliency(sal, sal_path)
        records.append(
            ManifestRecord(
                frame_path=os.path.relpath(store.frame_path(frame_id), root),
                saliency_path=os.path.relpath(sal_path, root),
                split=Split.TRAIN,
            )
        )
    save_manifest(DatasetManifest(records=records, root=root), root / "manifest.json")


def _rollout_states(env, total_steps: int, seed: int = 0):
    import copy as _copy

    rng = np.random.default_rng(seed)
    states = []
    episode_seed = seed
    env.reset(seed=episode_seed)
    states.append(_copy.deepcopy(env.state))
    while len(states) < total_steps:
        action = rng.uniform(-1.0, 1.0, size=env.action_dim)
        _, _, done, _ = env.step(action)
        states.append(_copy.deepcopy(env.state))
        if done and len(states) < total_steps:
            episode_seed += 1
            env.reset(seed=episode_seed)
            states.append(_copy.deepcopy(env.state))
    return states[:total_steps]


def _train_saliency_stage(config: ExperimentConfig, manifest_path: Path, out_path: Path) -> None:
    manifest = load_manifest(manifest_path)
    pairs = []
    for rec in manifest.records:
        frame = load_frame(manifest.resolve(rec.frame_path))
        sal = load_saliency(manifest.resolve(rec.saliency_path), source=SaliencySource.HUMAN)
        pairs.append((frame, sal))
    cfg = PredictorConfig(**config.predictor)
    ckpt = train_predictor(pairs, cfg)
    save_checkpoint(ckpt, out_path)


def _pretrain_stage(config: ExperimentConfig, manifest_path: Path, out_path: Path) -> None:
    manifest = load_manifest(manifest_path)
    mae_kwargs = dict(config.mae)
    steps = mae_kwargs.pop("steps", 300)
    batch_size = mae_kwargs.pop("batch_size", 16)
    lr = mae_kwargs.pop("lr", 1e-3)
    modalities = tuple(Modality(m) for m in mae_kwargs.pop("modalities", ["rgb", "saliency"]))
    inference_uses_aux = bool(mae_kwargs.pop("inference_uses_aux", True))
    cfg = MaeConfig(modalities=modalities, **mae_kwargs)

    images: dict[Modality, list[np.ndarray]] = {m: [] for m in modalities}
    for rec in manifest.records:
        frame = load_frame(manifest.resolve(rec.frame_path))
        images[Modality.RGB].append(frame.pixels.astype(np.float32) / 255.0)
        if Modality.SALIENCY in images:
            sal = load_saliency(manifest.resolve(rec.saliency_path))
            images[Modality.SALIENCY].append(sal.values[..., None])
    stacked = {m: np.stack(v) for m, v in images.items() if v}
    result = pretrain(stacked, cfg, steps=steps, batch_size=batch_size, lr=lr, seed=0)
    aux = next((m for m in modalities if m is not Modality.RGB), None)
    mode = PretrainMode(
        mode=PretrainKind.RGB_PLUS_AUX if aux else PretrainKind.RGB_ONLY,
        aux=aux,
        inference_uses_aux=inference_uses_aux and aux is not None,
    )
    save_mae(result, out_path, mode=mode)


def _perturb_config(payload: dict) -> PerturbConfig:
    kind = PerturbKind(payload.get("kind", "none"))
    video_frames = make_gradient_clip(seed=payload.get("seed", 0)) if kind is PerturbKind.VIDEO else []
    return PerturbConfig(
        kind=kind,
        strength=float(payload.get("strength", 0.5)),
        video_frames=video_frames,
        seed=int(payload.get("seed", 0)),
    )


def aggregate_metrics(metrics_dir: str | Path, allow_mixed: bool = False, population_std: bool = False) -> list[dict]:
    """Latest-step score per seed, aggregated to mean±std per table cell."""
    metrics_dir = Path(metrics_dir)
    files = sorted(metrics_dir.glob("*.jsonl"))
    if not files:
        raise FileNotFoundError(f"no metrics files in {metrics_dir}")
    records: list[EvalRecord] = []
    for f in files:
        records.extend(read_jsonl(f))
    hashes = {r.config_hash for r in records if r.config_hash}
    if len(hashes) > 1 and not allow_mixed:
        raise ValueError(
            f"metrics mix {len(hashes)} different config hashes; pass allow_mixed to override"
        )

    latest: dict[tuple, EvalRecord] = {}
    for rec in records:
        key = (rec.task, rec.variant, rec.perturbation, rec.seed)
        if key not in latest or rec.step >= latest[key].step:
            latest[key] = rec

    cells: dict[tuple, list[float]] = {}
    for (task, variant, perturbation, _seed), rec in sorted(latest.items()):
        cells.setdefault((task, variant, perturbation), []).append(rec.score)
    rows = []
    for (task, variant, perturbation), scores in sorted(cells.items()):
        mean, std = mean_std(scores, population=population_std)
        rows.append(
            {
                "task": task,
                "variant": variant,
                "perturbation": perturbation,
                "mean": mean,
                "std": std,
                "seeds": len(scores),
            }
        )
    return rows


def report(
    metrics_dir: str | Path,
    out_dir: str | Path,
    allow_mixed: bool = False,
    population_std: bool = False,
) -> dict:
    """Emit summary.csv, summary.md, and figures from raw metrics JSONL."""
    metrics_dir = Path(metrics_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = aggregate_metrics(metrics_dir, allow_mixed=allow_mixed, population_std=population_std)

    csv_path = out_dir / "summary.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["task", "variant", "perturbation", "mean", "std", "seeds"])
        writer.writeheader()
        writer.writerows(rows)

    # Markdown table: rows = (task, perturbation), columns = variants, best flagged.
    variants = sorted({r["variant"] for r in rows})
    groups = sorted({(r["task"], r["perturbation"]) for r in rows})
    lines = ["| task | perturbation | " + " | ".join(variants) + " |"]
    lines.append("|" + "---|" * (2 + len(variants)))
    for task, perturbation in groups:
        cells = []
        group_rows = {
            r["variant"]: r for r in rows if (r["task"], r["perturbation"]) == (task, perturbation)
        }
        best = max((r["mean"] for r in group_rows.values()), default=float("nan"))
        for variant in variants:
            r = group_rows.get(variant)
            if r is None:
                cells.append("—")
            else:
                text = f"{r['mean']:.3f} ± {r['std']:.3f}"
                cells.append(f"**{text}**" if r["mean"] == best else text)
        lines.append(f"| {task} | {perturbation} | " + " | ".join(cells) + " |")
    md_path = out_dir / "summary.md"
    md_path.write_text("\n".join(lines) + "\n")

    figures = [str(plot_summary_bars(rows, out_dir / "figures" / "summary_bars.png"))]
    curves: dict[str, list[tuple[int, float]]] = {}
    for f in sorted(metrics_dir.glob("train_*.jsonl")):
        for rec in read_jsonl(f):
            curves.setdefault(f"{rec.variant}/s{rec.seed}", []).append((rec.step, rec.score))
    if curves:
        figures.append(str(plot_learning_curves(curves, out_dir / "figures" / "learning_curves.png")))

    return {"csv": str(csv_path), "markdown": str(md_path), "figures": figures, "rows": rows}
