"""Command line front end.

Exit codes: 0 success, 1 configuration problem, 2 bad input data,
3 model fitting did not converge.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import DataError, load_survival_csv
from .detection import (
    MeanShiftConfig,
    detect_nuclei,
    load_detections_csv,
    probability_map,
    save_detections_csv,
    save_probability_map_png,
)
from .forest import ForestConfig, load_forest, save_forest, train_forest
from .images import load_image, to_gray
from .online import OnlineParams, OnlineSession, read_correction_log, replay_corrections
from .pipeline import (
    ConfigError,
    collect_training_data,
    config_from_toml,
    load_manifest,
    run_study,
)
from .staining import (
    fit_staining_model,
    load_staining_csv,
    patient_staining_multi,
    save_staining_csv,
)
from .survival import (
    FitOptions,
    design_matrix,
    expand_interactions,
    fit_weibull_ph,
    kaplan_meier,
    log_rank,
    save_km_csv,
    save_model_json,
    split_by_staining,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NO_CONVERGENCE = 3


class NonConvergence(Exception):
    pass


def _cmd_train(args) -> int:
    entries = load_manifest(args.manifest)
    training = collect_training_data(
        entries, args.annotations, args.window,
        min_distance=args.min_distance)
    cfg = ForestConfig(
        n_trees=args.trees, max_depth=args.depth,
        n_features_per_node=args.features, window=args.window,
        background_ratio=args.background_ratio, rng_seed=args.seed)
    forest = train_forest(training.patches, training.labels, cfg)
    save_forest(forest, args.out)
    print(f"trained {len(forest.trees)} trees on "
          f"{len(training.labels)} samples -> {args.out}")
    return EXIT_OK


def _cmd_detect(args) -> int:
    forest = load_forest(args.forest)
    img = load_image(args.image)
    gray = to_gray(img)
    cfg = MeanShiftConfig(radius=args.radius)
    detections = detect_nuclei(forest, gray, cfg, stride=args.stride)
    spot_id = args.spot_id or Path(args.image).stem
    save_detections_csv(detections, spot_id, args.out)
    if args.prob_map:
        pmap = probability_map(forest, gray, stride=args.stride)
        save_probability_map_png(pmap, args.prob_map)
    print(f"{spot_id}: {len(detections)} nuclei -> {args.out}")
    return EXIT_OK


def _cmd_stain(args) -> int:
    entries = load_manifest(args.manifest)
    training = collect_training_data(
        entries, args.annotations, window=3,
        radius=args.radius, bins_per_channel=args.bins)
    radius = args.radius if args.radius is not None else training.mean_radius
    model = fit_staining_model(training.stained_hists,
                               training.unstained_hists, radius)
    rows = load_detections_csv(args.detections)
    by_spot: dict[str, list] = {}
    for spot_id, det in rows:
        by_spot.setdefault(spot_id, []).append(det)
    by_patient: dict[str, list] = {}
    for entry in entries:
        if entry.spot_id in by_spot:
            img = load_image(entry.image_path)
            by_patient.setdefault(entry.patient_id, []).append(
                (img, by_spot[entry.spot_id]))
    if not by_patient:
        raise DataError("no detections matched any manifest spot")
    staining = [patient_staining_multi(pid, spots, model)
                for pid, spots in sorted(by_patient.items())]
    save_staining_csv(staining, args.out)
    print(f"{len(staining)} patients -> {args.out}")
    return EXIT_OK


def _cmd_survival(args) -> int:
    staining = load_staining_csv(args.staining)
    survival = {r.patient_id: r for r in load_survival_csv(args.survival)}
    pairs = [(ps, survival[ps.patient_id]) for ps in staining
             if ps.patient_id in survival]
    if len(pairs) < 2:
        raise DataError("fewer than two patients with both staining and survival")
    low, high = split_by_staining(pairs, rule=args.rule)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_km_csv(kaplan_meier([r for _, r in low]), out_dir / "km_low.csv")
    save_km_csv(kaplan_meier([r for _, r in high]), out_dir / "km_high.csv")
    lr = log_rank([r for _, r in low], [r for _, r in high])
    summary = {
        "n_low": len(low), "n_high": len(high),
        "chi2": lr.chi2, "p_value": lr.p_value,
    }
    print(f"log-rank chi2={lr.chi2:.6g} p={lr.p_value:.6g} "
          f"(n_low={len(low)}, n_high={len(high)})")

    if args.fit_weibull:
        records = []
        for ps, rec in pairs:
            cov = dict(rec.covariates)
            cov["staining_pct"] = ps.percentage
            records.append(type(rec)(rec.patient_id, rec.time_months,
                                     rec.event, cov))
        names = sorted(records[0].covariates)
        design = expand_interactions(
            design_matrix(records, names), names, max(1, args.interactions))
        options = FitOptions(random_intercept=args.random_intercept)
        model = fit_weibull_ph(records, design=design, options=options)
        save_model_json(model, out_dir / "weibull_model.json")
        summary["weibull"] = {"alpha": model.alpha, "lambda": model.lam,
                              "beta": dict(zip(model.beta_names,
                                               [float(b) for b in model.beta]))}
        if not model.diagnostics.get("converged", False):
            raise NonConvergence(
                f"Weibull fit stopped at gradient norm "
                f"{model.diagnostics.get('grad_norm')!r}")
        print(f"weibull alpha={model.alpha:.4g} lambda={model.lam:.4g}")
    with open(out_dir / "survival_summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def _cmd_study(args) -> int:
    cfg = config_from_toml(args.config)
    result = run_study(cfg)
    print(f"{len(result.staining)} patients, "
          f"{len(result.quarantined)} quarantined spots")
    print(f"log-rank chi2={result.chi2:.6g} p={result.p_value:.6g}")
    print(f"outputs in {cfg.out_dir}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = config_from_toml(args.config)
    forest_path = args.forest
    if forest_path is None:
        candidate = cfg.out_dir / "forest.json"
        forest_path = candidate if candidate.exists() else None
    app = create_app(
        cfg.manifest_csv, cfg.annotations_dir, cfg.out_dir,
        forest_path=forest_path, study_config_path=args.config,
        detection_radius=args.radius, stride=cfg.stride)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def _cmd_replay(args) -> int:
    forest = load_forest(args.forest)
    entries = load_manifest(args.manifest)
    images = {}
    corrections = read_correction_log(args.log)
    needed = {c.spot_id for c in corrections}
    for entry in entries:
        if entry.spot_id in needed:
            images[entry.spot_id] = to_gray(load_image(entry.image_path))
    missing = sorted(needed - set(images))
    if missing:
        raise DataError(f"corrections reference unknown spots: {missing}")

    if args.annotations:
        training = collect_training_data(entries, args.annotations,
                                         forest.window)
        patches = np.stack(training.patches)
        labels = np.array(training.labels)
        params = OnlineParams()
    else:
        patches = np.zeros((0, forest.window, forest.window), dtype=np.int64)
        labels = np.zeros(0, dtype=np.int64)
        params = OnlineParams(k_new=0)
    session = OnlineSession(forest, patches, labels, images,
                            params=params, seed=args.seed)
    final = replay_corrections(session, corrections)
    save_forest(final, args.out)
    print(f"replayed {len(corrections)} corrections -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmalab",
        description="Nucleus detection, staining scoring and survival "
                    "analysis for tissue microarray spots.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detection forest from annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=33)
    p.add_argument("--trees", type=int, default=16)
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--features", type=int, default=20)
    p.add_argument("--background-ratio", type=float, default=1.0)
    p.add_argument("--min-distance", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="detect nuclei on one spot image")
    p.add_argument("--forest", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--spot-id", default=None)
    p.add_argument("--prob-map", default=None,
                   help="also write the probability map PNG here")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("stain", help="score staining for detected nuclei")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--bins", type=int, default=8)
    p.set_defaults(func=_cmd_stain)

    p = sub.add_parser("survival", help="staining split, KM curves, log-rank")
    p.add_argument("--staining", required=True)
    p.add_argument("--survival", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rule", default="median")
    p.add_argument("--fit-weibull", action="store_true")
    p.add_argument("--interactions", type=int, default=1)
    p.add_argument("--random-intercept", action="store_true")
    p.set_defaults(func=_cmd_survival)

    p = sub.add_parser("study", help="run the full study pipeline")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--config", required=True)
    p.add_argument("--forest", default=None)
    p.add_argument("--radius", type=float, default=7.0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("replay", help="rebuild a forest from a correction log")
    p.add_argument("--forest", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--annotations", default=None,
                   help="training annotations; enables tree growth")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonConvergence as exc:
        print(f"did not converge: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
