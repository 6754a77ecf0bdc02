"""Command-line entry point: synth, preprocess, pretrain, train, eval,
interpret, report. Every stage writes its artifacts under the run directory
given by --out, alongside a run-metadata file that makes the run
reproducible (seed, config hash, versions).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import config as cfgmod
from .core import (
    Cohort,
    PairRecord,
    Rng,
    Volume,
    ensure_dir,
    manifest_load,
    manifest_save,
    volume_read,
    volume_write,
    write_run_metadata,
)
from .encoder import Encoder, EncoderConfig
from .errors import (
    ConfigError,
    CorrelationUndefinedError,
    DegenerateIntensityError,
    DependencyError,
    TafnetError,
)
from .synthcohort import PhantomSpec, generate_cohort, generate_pretrain_set, load_pretrain_index

STAGES = ("synth", "preprocess", "pretrain", "train", "eval", "interpret", "report")


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("TAFNET_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _require(path: str, stage: str, required: str) -> str:
    if not os.path.exists(path):
        raise DependencyError(stage, required)
    return path


def _encoder_cfg(cfg: dict) -> EncoderConfig:
    channels = cfgmod.int_list(cfg, "encoder.channels")
    if cfg["encoder.input_grid"] != cfg["preprocess.target_grid"]:
        raise ConfigError(
            "encoder.input_grid must equal preprocess.target_grid "
            f"({cfg['encoder.input_grid']} vs {cfg['preprocess.target_grid']})"
        )
    if cfg["fusion.d_model"] != channels[-1]:
        raise ConfigError(
            f"fusion.d_model ({cfg['fusion.d_model']}) must equal the last "
            f"encoder channel ({channels[-1]})"
        )
    return EncoderConfig(
        channels=tuple(channels),
        input_grid=cfg["encoder.input_grid"],
        dcca_enabled=cfg["encoder.dcca_enabled"],
        leaky_slope=cfg["encoder.leaky_slope"],
    )


def _phantom_spec(cfg: dict) -> PhantomSpec:
    return PhantomSpec(
        grid=cfg["synth.grid"],
        noise_sigma=cfg["synth.noise_sigma"],
        converter_expansion_rate=cfg["synth.expansion_rate"],
        converter_shrink_rate=cfg["synth.shrink_rate"],
        baseline_matched=cfg["synth.baseline_matched"],
        geometry_jitter=cfg["synth.geometry_jitter"],
        pretrain_ad_ventricle_scale=cfg["synth.pretrain_ad_scale"],
    )


def _train_cfg(cfg: dict, prefix: str, phase: str):
    from .trainer import TrainConfig

    return TrainConfig(
        lr=cfg[f"{prefix}.lr"],
        weight_decay=cfg[f"{prefix}.weight_decay"],
        batch_size=cfg[f"{prefix}.batch_size"],
        epochs=cfg[f"{prefix}.epochs"],
        class_weighting=cfg.get(f"{prefix}.class_weighting", True),
        seed=cfg["seed"],
        phase=phase,
        augment=cfg.get(f"{prefix}.augment", False),
        val_fraction=cfg.get("pretrain.val_fraction", 0.2),
    )


def stage_synth(cfg: dict, out: str) -> None:
    synth_dir = ensure_dir(os.path.join(out, "synth"))
    spec = _phantom_spec(cfg)
    rng = Rng(cfg["seed"])
    generate_cohort(
        spec,
        cfg["synth.n_subjects"],
        cfg["synth.converter_fraction"],
        cfgmod.int_list(cfg, "synth.intervals"),
        rng,
        synth_dir,
        workers=_workers(),
    )
    if cfg["synth.pretrain_n"] > 0:
        generate_pretrain_set(spec, cfg["synth.pretrain_n"], rng.spawn(10_000), synth_dir)


def stage_preprocess(cfg: dict, out: str) -> None:
    from .preprocess import preprocess_volume

    manifest = _require(os.path.join(out, "synth", "manifest.csv"), "preprocess", "synth")
    cohort = manifest_load(manifest)
    pre_dir = ensure_dir(os.path.join(out, "preprocess"))
    vol_dir = ensure_dir(os.path.join(pre_dir, "volumes"))
    target = (cfg["preprocess.target_grid"],) * 3
    min_nonzero = cfg["preprocess.min_nonzero"] or None

    qc_rows = []
    path_map: dict[str, str] = {}

    def process(src: str) -> None:
        if src in path_map:
            return
        vid = os.path.splitext(os.path.basename(src))[0]
        dst = os.path.join(vol_dir, f"{vid}.vol")
        try:
            result = preprocess_volume(
                volume_read(src), target,
                tau=cfg["preprocess.tau"], sigma=cfg["preprocess.sigma"],
                min_nonzero=min_nonzero,
            )
        except DegenerateIntensityError:
            qc_rows.append([vid, 0, 0, 0, "", ""])
            return
        volume_write(result.volume, dst)
        qc_rows.append([
            vid, int(result.qc.dims_ok), int(result.qc.range_ok),
            result.qc.nonzero_count, repr(result.noise_before), repr(result.noise_after),
        ])
        if result.qc.passed:
            path_map[src] = dst

    for p in cohort.pairs:
        process(p.baseline_ref)
        process(p.followup_ref)
    kept = tuple(
        PairRecord(p.subject_id, path_map[p.baseline_ref], path_map[p.followup_ref],
                   p.interval_months, p.label)
        for p in cohort.pairs
        if p.baseline_ref in path_map and p.followup_ref in path_map
    )
    manifest_save(Cohort(kept), os.path.join(pre_dir, "manifest.csv"))

    with open(os.path.join(pre_dir, "qc_report.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "dims_ok", "range_ok", "nonzero_count",
                         "noise_before", "noise_after"])
        writer.writerows(qc_rows)

    pretrain_index = os.path.join(out, "synth", "pretrain_index.csv")
    if os.path.exists(pretrain_index):
        rows = []
        for src, label in load_pretrain_index(pretrain_index):
            vid = os.path.splitext(os.path.basename(src))[0]
            dst = os.path.join(vol_dir, f"{vid}.vol")
            result = preprocess_volume(
                volume_read(src), target,
                tau=cfg["preprocess.tau"], sigma=cfg["preprocess.sigma"],
                min_nonzero=min_nonzero,
            )
            if result.qc.passed:
                volume_write(result.volume, dst)
                rows.append([dst, label])
        with open(os.path.join(pre_dir, "pretrain_index.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["path", "label"])
            writer.writerows(rows)


def stage_pretrain(cfg: dict, out: str) -> None:
    from .nnkit import save_checkpoint
    from .trainer import pretrain

    index = _require(os.path.join(out, "preprocess", "pretrain_index.csv"),
                     "pretrain", "preprocess")
    dataset = load_pretrain_index(index)
    pre_dir = ensure_dir(os.path.join(out, "pretrain"))
    encoder = Encoder(_encoder_cfg(cfg), seed=cfg["seed"])
    result = pretrain(encoder, dataset, _train_cfg(cfg, "pretrain", "pretrain"))
    save_checkpoint(os.path.join(pre_dir, "encoder.ckpt"), result.state)
    _write_loss_csv(os.path.join(pre_dir, "loss_curve.csv"), result.epoch_losses)
    with open(os.path.join(pre_dir, "metrics.txt"), "w") as f:
        f.write(f"val_auc={result.val_auc!r}\n")
        for e, v in enumerate(result.val_auc_history):
            f.write(f"val_auc_epoch_{e}={v!r}\n")


def _write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        for e, v in enumerate(losses):
            writer.writerow([e, repr(v)])


def _load_features_npz(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        paths = [str(p) for p in data["paths"]]
        feats = data["features"]
    return {p: feats[i] for i, p in enumerate(paths)}


def stage_train(cfg: dict, out: str) -> None:
    from .nnkit import load_checkpoint, save_checkpoint, state_hash
    from .trainer import cohort_features, finetune

    ckpt_path = _require(os.path.join(out, "pretrain", "encoder.ckpt"), "train", "pretrain")
    manifest = _require(os.path.join(out, "preprocess", "manifest.csv"), "train", "preprocess")
    cohort = manifest_load(manifest)
    train_dir = ensure_dir(os.path.join(out, "train"))
    enc_cfg = _encoder_cfg(cfg)

    encoder = Encoder(enc_cfg, seed=0)
    full_state = load_checkpoint(ckpt_path)
    encoder.load_state_dict({
        k[len("encoder."):]: v for k, v in full_state.items() if k.startswith("encoder.")
    })
    encoder.freeze().eval()
    features = cohort_features(encoder, cohort)
    paths = sorted(features)
    np.savez(
        os.path.join(train_dir, "features.npz"),
        paths=np.array(paths),
        features=np.stack([features[p] for p in paths]),
    )

    kind = cfg["train.model"]
    result = finetune(
        ckpt_path, kind, cohort.pairs, _train_cfg(cfg, "train", "finetune"),
        encoder_cfg=enc_cfg, features=features,
        lstm_hidden=cfg["baselines.lstm_hidden"],
    )
    if result.encoder_hash_before != result.encoder_hash_after:
        raise TafnetError("freeze contract violated: encoder section hash changed")
    save_checkpoint(os.path.join(train_dir, f"model_{kind}.ckpt"), result.state)
    _write_loss_csv(os.path.join(train_dir, f"loss_curve_{kind}.csv"), result.epoch_losses)
    with open(os.path.join(train_dir, "metadata.txt"), "w") as f:
        f.write(f"model={kind}\n")
        f.write(f"encoder_hash_before={result.encoder_hash_before}\n")
        f.write(f"encoder_hash_after={result.encoder_hash_after}\n")
        f.write(f"encoder_section_hash={state_hash(full_state, 'encoder.')}\n")


def stage_eval(cfg: dict, out: str) -> None:
    from .evalstats import (
        aggregate,
        friedman,
        learning_curve,
        pooled_roc,
        roc_points,
        run_cv_experiment,
        wilcoxon_signed_rank,
    )
    from .nnkit import load_checkpoint, state_hash
    from .report import (
        write_learning_curve_csv,
        write_metrics_csv,
        write_roc_csv,
        write_stats_csv,
    )

    features_path = _require(os.path.join(out, "train", "features.npz"), "eval", "train")
    manifest = _require(os.path.join(out, "preprocess", "manifest.csv"), "eval", "preprocess")
    cohort = manifest_load(manifest)
    features = _load_features_npz(features_path)
    eval_dir = ensure_dir(os.path.join(out, "eval"))
    models = cfgmod.str_list(cfg, "eval.models")
    tcfg = _train_cfg(cfg, "train", "finetune")

    results = run_cv_experiment(
        cohort, features, models, tcfg,
        k=cfg["eval.folds"], seed=cfg["seed"], threshold=cfg["eval.threshold"],
        lstm_hidden=cfg["baselines.lstm_hidden"],
    )
    write_metrics_csv(os.path.join(eval_dir, "metrics.csv"), results)

    pairwise = []
    reference = models[0]
    ref_aucs = np.array([fr.auc for fr in results[reference]])
    for other in models[1:]:
        other_aucs = np.array([fr.auc for fr in results[other]])
        w, p = wilcoxon_signed_rank(ref_aucs, other_aucs, alternative="greater")
        diffs = ref_aucs - other_aucs
        pairwise.append({
            "comparison": f"{reference}_vs_{other}",
            "delta_auc": float(aggregate(ref_aucs)[0] - aggregate(other_aucs)[0]),
            "wins": int((diffs > 0).sum()),
            "ties": int((diffs == 0).sum()),
            "losses": int((diffs < 0).sum()),
            "w": w,
            "p": p,
        })
    matrix = np.column_stack([[fr.auc for fr in results[m]] for m in models])
    write_stats_csv(os.path.join(eval_dir, "stats.csv"), pairwise, friedman(matrix), models)

    roc = {}
    pooled_aucs = {}
    for m in models:
        pooled = [s for fr in results[m] for s in fr.scores]
        roc[m] = roc_points(pooled)
        pooled_aucs[m] = pooled_roc([fr.scores for fr in results[m]])
    write_roc_csv(os.path.join(eval_dir, "pooled_roc.csv"), roc)

    if cfg["eval.learning_curve"]:
        cells = learning_curve(
            cohort, features, cfgmod.float_list(cfg, "eval.fractions"),
            sorted({p.interval_months for p in cohort.pairs}), models, tcfg,
            k=cfg["eval.folds"], seed=cfg["seed"],
        )
        write_learning_curve_csv(os.path.join(eval_dir, "learning_curve.csv"), cells)

    encoder_hash = state_hash(
        load_checkpoint(os.path.join(out, "pretrain", "encoder.ckpt")), "encoder."
    )
    with open(os.path.join(eval_dir, "metadata.txt"), "w") as f:
        for m in models:
            f.write(f"encoder_hash[{m}]={encoder_hash}\n")
            f.write(f"pooled_auc[{m}]={pooled_aucs[m]!r}\n")


def stage_interpret(cfg: dict, out: str) -> None:
    from .fusion import TafNet
    from .interpret import (
        extract_attention_map,
        extract_gates,
        gate_correlation,
        gate_summary,
        save_overlay,
    )
    from .nnkit import load_checkpoint

    kind = cfg["train.model"]
    if kind != "tafnet":
        raise ConfigError("interpret requires train.model = tafnet")
    ckpt = _require(os.path.join(out, "train", f"model_{kind}.ckpt"), "interpret", "train")
    manifest = _require(os.path.join(out, "preprocess", "manifest.csv"),
                        "interpret", "preprocess")
    cohort = manifest_load(manifest)
    interp_dir = ensure_dir(os.path.join(out, "interpret"))
    enc_cfg = _encoder_cfg(cfg)

    model = TafNet(
        encoder=Encoder(enc_cfg, seed=0),
        channels=enc_cfg.feature_channels,
        heads=cfg["fusion.heads"],
        gate_hidden=64,
        head_hidden=cfg["head.hidden"],
        head_dropout=cfg["head.dropout"],
    )
    model.load_state_dict(load_checkpoint(ckpt))
    model.is_trained = True
    model.eval()

    subset = cohort.pairs[: cfg["interpret.max_pairs"]]
    for p in subset:
        bl = volume_read(p.baseline_ref)
        fu = volume_read(p.followup_ref)
        amap = extract_attention_map(model, (bl, fu))
        tag = f"{p.subject_id}_{p.interval_months:02d}"
        volume_write(Volume(amap.grid.astype(np.float32), intensity_range_tag="unit"),
                     os.path.join(interp_dir, f"attention_{tag}.vol"))
        save_overlay(bl, amap, os.path.join(interp_dir, f"overlay_{tag}.png"))

    profiles = extract_gates(model, Cohort(tuple(subset)))
    with open(os.path.join(interp_dir, "gate_profiles.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject_id", "alpha", "beta", "gamma", "probability", "dominant"])
        for prof in profiles:
            writer.writerow([
                prof.subject_id, repr(prof.gates.alpha), repr(prof.gates.beta),
                repr(prof.gates.gamma), repr(prof.probability), prof.gates.dominant(),
            ])
    summary = gate_summary(profiles)
    with open(os.path.join(interp_dir, "gate_summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["coefficient", "mean", "std", "min", "max", "p_vs_uniform",
                         "dominant_count"])
        for name, row in summary["coefficients"].items():
            writer.writerow([
                name, repr(row["mean"]), repr(row["std"]), repr(row["min"]),
                repr(row["max"]), repr(row["p_vs_uniform"]), summary["dominance"][name],
            ])
    with open(os.path.join(interp_dir, "gate_correlation.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["coefficient", "pearson_r", "p_value", "note"])
        try:
            for name, (r, p_val) in gate_correlation(profiles).items():
                writer.writerow([name, repr(r), repr(p_val), ""])
        except CorrelationUndefinedError as e:
            writer.writerow(["", "", "", f"undefined: {e}"])


def stage_report(cfg: dict, out: str, metrics_path: str | None = None) -> None:
    from .report import render_report

    eval_dir = os.path.join(out, "eval")
    if metrics_path is None:
        metrics_path = _require(os.path.join(eval_dir, "metrics.csv"), "report", "eval")
        stats_csv = os.path.join(eval_dir, "stats.csv")
        roc_csv = os.path.join(eval_dir, "pooled_roc.csv")
        lc_csv = os.path.join(eval_dir, "learning_curve.csv")
    else:
        stats_csv = roc_csv = lc_csv = None
    report_dir = os.path.join(out, "report")
    summary = render_report(report_dir, metrics_path, stats_csv, roc_csv, lc_csv)
    sys.stdout.write(summary)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tafnet",
        description="Longitudinal paired-volume conversion prediction pipeline",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", default=None, help="flat-key config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default="tafnet_run", help="run directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override (repeatable)")
        if stage == "report":
            p.add_argument("--metrics", default=None,
                           help="render directly from a metrics CSV")
    return parser


def run(stage: str, cfg: dict, out: str, metrics_path: str | None = None) -> None:
    ensure_dir(out)
    cfgmod.write_echo(cfg, os.path.join(out, "config_echo.txt"))
    write_run_metadata(
        os.path.join(out, "run_metadata.txt"), cfg["seed"], cfgmod.config_hash(cfg),
        extra={"stage": stage},
    )
    if stage == "synth":
        stage_synth(cfg, out)
    elif stage == "preprocess":
        stage_preprocess(cfg, out)
    elif stage == "pretrain":
        stage_pretrain(cfg, out)
    elif stage == "train":
        stage_train(cfg, out)
    elif stage == "eval":
        stage_eval(cfg, out)
    elif stage == "interpret":
        stage_interpret(cfg, out)
    elif stage == "report":
        stage_report(cfg, out, metrics_path)
    else:
        raise ConfigError(f"unknown stage {stage!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config, args.set, args.seed)
        run(args.stage, cfg, args.out, getattr(args, "metrics", None))
    except DependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TafnetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
