"""Command-line entry point orchestrating the pipeline stages.

Subcommands: sample-frames, annotate-serve, train-saliency, pretrain,
train-rl, eval-gen, report, run-pipeline. The VSRL_DATA_ROOT environment
variable overrides the data root used by run-pipeline.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _add_sample_frames(sub):
    p = sub.add_parser("sample-frames", help="roll out an env and pool frames for annotation")
    p.add_argument("--env", default="toy-reach")
    p.add_argument("--data-root", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--rollout-steps", type=int, default=200)
    p.add_argument("--strategy", choices=["uniform", "episode_boundary"], default="uniform")
    p.add_argument("--seed", type=int, default=0)


def _add_annotate_serve(sub):
    p = sub.add_parser("annotate-serve", help="run the annotation HTTP service")
    p.add_argument("--data-root", required=True)
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--lease-minutes", type=float, default=10.0)


def _add_train_saliency(sub):
    p = sub.add_parser("train-saliency", help="train the few-shot saliency predictor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)


def _add_pretrain(sub):
    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modalities", default="rgb,saliency")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)


def _add_train_rl(sub):
    p = sub.add_parser("train-rl", help="train a SAC policy with a fusion variant")
    p.add_argument("--env", default="toy-reach")
    p.add_argument("--encoder", choices=["cnn", "mae"], default="cnn")
    p.add_argument("--fusion", default="rgb_s")
    p.add_argument("--saliency", choices=["oracle", "predictor", "none"], default="oracle")
    p.add_argument("--predictor-ckpt")
    p.add_argument("--mae-ckpt")
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", help="output JSONL path")
    p.add_argument("--ckpt", help="output agent checkpoint path")


def _add_eval_gen(sub):
    p = sub.add_parser("eval-gen", help="evaluate a checkpoint under observation perturbations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", default="toy-reach")
    p.add_argument("--perturb", choices=["none", "color", "video"], default="color")
    p.add_argument("--strength", type=float, default=0.5)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output JSONL path")


def _add_report(sub):
    p = sub.add_parser("report", help="aggregate metrics into tables and figures")
    p.add_argument("--metrics-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--allow-mixed", action="store_true")
    p.add_argument("--population-std", action="store_true")


def _add_run_pipeline(sub):
    p = sub.add_parser("run-pipeline", help="run all pending pipeline stages from a config file")
    p.add_argument("--config", required=True, help="experiment config JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (
        _add_sample_frames,
        _add_annotate_serve,
        _add_train_saliency,
        _add_pretrain,
        _add_train_rl,
        _add_eval_gen,
        _add_report,
        _add_run_pipeline,
    ):
        add(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "sample-frames":
        from .annotate import AnnotationStore, SampleStrategy, collect_rollout_frames, sample_frames
        from .envs import make_env

        env = make_env(args.env)
        frames, boundaries = collect_rollout_frames(env, args.rollout_steps, seed=args.seed)
        pool = sample_frames(
            frames, args.n, SampleStrategy(args.strategy), seed=args.seed, boundaries=boundaries
        )
        store = AnnotationStore(args.data_root)
        store.init_pool(pool)
        print(f"pooled {len(pool)} frames under {args.data_root}")
        return 0

    if args.command == "annotate-serve":
        import uvicorn

        from .annotate import AnnotationStore, create_app

        store = AnnotationStore(args.data_root, lease_minutes=args.lease_minutes)
        app = create_app(store)
        uvicorn.run(app, host="127.0.0.1", port=args.port)
        return 0

    if args.command == "train-saliency":
        from .data import SaliencySource, load_frame, load_manifest, load_saliency
        from .saliency import PredictorConfig, save_checkpoint, train_predictor

        manifest = load_manifest(args.manifest)
        pairs = [
            (
                load_frame(manifest.resolve(rec.frame_path)),
                load_saliency(manifest.resolve(rec.saliency_path), source=SaliencySource.HUMAN),
            )
            for rec in manifest.records
        ]
        cfg = PredictorConfig(steps=args.steps, learning_rate=args.lr, seed=args.seed)
        ckpt = train_predictor(pairs, cfg)
        save_checkpoint(ckpt, args.out)
        print(f"saliency predictor: final loss {ckpt.train_loss_history[-1]:.4f} -> {args.out}")
        return 0

    if args.command == "pretrain":
        from .data import load_frame, load_manifest, load_saliency
        from .mae import MaeConfig, Modality, PretrainKind, PretrainMode, pretrain, save_mae

        manifest = load_manifest(args.manifest)
        modalities = tuple(Modality(m.strip()) for m in args.modalities.split(","))
        images = {m: [] for m in modalities}
        for rec in manifest.records:
            frame = load_frame(manifest.resolve(rec.frame_path))
            images[Modality.RGB].append(frame.pixels.astype(np.float32) / 255.0)
            if Modality.SALIENCY in images and rec.saliency_path:
                images[Modality.SALIENCY].append(load_saliency(manifest.resolve(rec.saliency_path)).values[..., None])
        stacked = {m: np.stack(v) for m, v in images.items() if v}
        cfg = MaeConfig(modalities=tuple(stacked), mask_ratio=args.mask_ratio)
        result = pretrain(stacked, cfg, steps=args.steps, seed=args.seed)
        aux = next((m for m in stacked if m is not Modality.RGB), None)
        mode = PretrainMode(
            mode=PretrainKind.RGB_PLUS_AUX if aux else PretrainKind.RGB_ONLY,
            aux=aux,
            inference_uses_aux=aux is not None,
        )
        save_mae(result, args.out, mode=mode)
        print(f"mae pretraining: final loss {result.loss_history[-1]:.4f} -> {args.out}")
        return 0

    if args.command == "train-rl":
        from .envs import make_env
        from .fusion import FusionVariant
        from .rl import SacConfig
        from .train import TrainConfig, train_rl

        cfg = TrainConfig(
            env_id=args.env,
            encoder_kind=args.encoder,
            fusion=FusionVariant(args.fusion),
            saliency_source=args.saliency,
            predictor_ckpt=args.predictor_ckpt,
            mae_ckpt=args.mae_ckpt,
            total_steps=args.steps,
            sac=SacConfig(seed=args.seed),
        )
        env = make_env(args.env)
        report_, _ = train_rl(
            env, cfg, metrics_path=args.metrics, ckpt_path=args.ckpt, log_fn=print
        )
        final = report_.records[-1]
        print(f"final eval: success={final.success_rate:.2f} return={final.avg_return:.2f}")
        return 0

    if args.command == "eval-gen":
        from .envs import make_env
        from .metrics import write_jsonl
        from .perturb import PerturbConfig, PerturbKind, eval_generalization, make_gradient_clip
        from .train import load_agent

        env = make_env(args.env)
        agent, tc = load_agent(args.ckpt, env)
        kind = PerturbKind(args.perturb)
        config = PerturbConfig(
            kind=kind,
            strength=args.strength,
            video_frames=make_gradient_clip(seed=args.seed) if kind is PerturbKind.VIDEO else [],
            seed=args.seed,
        )
        report_ = eval_generalization(agent, env, [config], args.episodes, tc, seed=args.seed)
        for rec in report_.records:
            print(json.dumps(rec.to_json()))
        if args.out:
            write_jsonl(report_.records, args.out)
        return 0

    if args.command == "report":
        from .pipeline import report as run_report

        summary = run_report(
            args.metrics_dir,
            args.out_dir,
            allow_mixed=args.allow_mixed,
            population_std=args.population_std,
        )
        print(f"wrote {summary['csv']}, {summary['markdown']}, {len(summary['figures'])} figure(s)")
        return 0

    if args.command == "run-pipeline":
        from .pipeline import ExperimentConfig, run_pipeline

        config = ExperimentConfig.from_file(args.config)
        result = run_pipeline(config)
        ran = [k for k, v in result["executed"].items() if v]
        print(f"executed stages: {', '.join(ran) if ran else '(none)'}")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
