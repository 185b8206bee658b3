"""Command line surface: gen, register, benchmark, eval, weights.

Exit codes: 0 success, 2 input error, 3 degenerate geometry. Every command is
deterministic for a fixed (inputs, seed); wall-clock timings are the only
fields that vary between repeated runs.
"""

from __future__ import annotations

import hashlib
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from .config import PRESETS, AppConfig, config_to_dict, load_config
from .errors import DegenerateGeometryError, InputError, PareRegError
from .estimator import (
    CorrespondenceSet,
    EstimatorConfig,
    Hypothesis,
    lgr_propose,
    propose_and_select,
    ransac,
    refine,
)
from .geom import PointCloud, RigidTransform, farthest_point_sample, knn, voxel_downsample
from .io import (
    read_json,
    read_ply,
    read_transform,
    read_xyz,
    write_correspondences_csv,
    write_json,
    write_ply,
    write_transform,
)
from .losses_metrics import (
    aggregate_metrics,
    inlier_ratio,
    rmse,
    rotation_error,
    translation_error,
)
from .matching import match_features
from .pareconv import backbone_forward
from .report import (
    RunReport,
    render_benchmark_figure,
    render_eval_figure,
    render_register_figure,
    write_benchmark_csv,
    write_report,
)
from .scenes import Scene, gen_scene
from .weights import (
    init_pipeline_params,
    load_weights,
    params_from_records,
    params_to_records,
    save_weights,
)

ESTIMATORS = ("feature", "ransac", "lgr")


@contextmanager
def _stage(name: str):
    """Tag any pipeline error with the stage it came from."""
    try:
        yield
    except PareRegError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


def _read_cloud(path: str) -> PointCloud:
    if path.endswith(".xyz"):
        return read_xyz(path)
    return read_ply(path)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- pipeline

def _estimate(
    corrs: CorrespondenceSet,
    patch_ids: np.ndarray,
    estimator: str,
    est_cfg: EstimatorConfig,
    seed: int,
) -> Hypothesis:
    if estimator == "feature":
        best = propose_and_select(corrs, est_cfg)
    elif estimator == "ransac":
        best = ransac(corrs, est_cfg, seed)
    elif estimator == "lgr":
        best = lgr_propose(corrs, patch_ids, est_cfg)
    else:
        raise InputError(f"estimator must be one of {ESTIMATORS}")
    return refine(best, corrs, est_cfg, weights=corrs.weights)


def _register_pair(
    cfg: AppConfig,
    cloud_p: PointCloud,
    cloud_q: PointCloud,
    t_gt,
    estimator: str,
    seed: int,
    pair_name: str,
    weights_path,
):
    timings = {}
    clock = time.monotonic

    with _stage("preprocess"):
        down_p = voxel_downsample(cloud_p, cfg.backbone.voxel)
        down_q = voxel_downsample(cloud_q, cfg.backbone.voxel)

    with _stage("weights"):
        if weights_path is not None:
            params = params_from_records(cfg, load_weights(weights_path))
        else:
            params = init_pipeline_params(cfg, seed)
        backbone_params, context_params, match_heads = params

    with _stage("backbone"):
        t0 = clock()
        pyr_p = backbone_forward(backbone_params, down_p)
        pyr_q = backbone_forward(backbone_params, down_q)
        timings["backbone"] = (clock() - t0) * 1e3

    with _stage("matching"):
        t0 = clock()
        coarse, fine = match_features(
            context_params,
            match_heads,
            pyr_p.super_invariant,
            pyr_q.super_invariant,
            pyr_p.superpoints,
            pyr_q.superpoints,
            pyr_p.point_invariant,
            pyr_q.point_invariant,
            pyr_p.grouping.groups,
            pyr_q.grouping.groups,
            n_c=cfg.n_coarse,
            n_f=cfg.n_fine,
        )
        timings["matching"] = (clock() - t0) * 1e3

    with _stage("estimate"):
        t0 = clock()
        corrs = CorrespondenceSet(
            src=pyr_p.points.points[fine.x],
            dst=pyr_q.points.points[fine.y],
            weights=fine.scores,
            features=(pyr_p.point_feats[fine.x], pyr_q.point_feats[fine.y]),
        )
        best = _estimate(corrs, fine.patch, estimator, cfg.estimator, seed)
        timings["hypothesis"] = (clock() - t0) * 1e3

    metrics = None
    if t_gt is not None:
        with _stage("metrics"):
            re_deg = rotation_error(best.transform.r.m, t_gt.r.m)
            te_m = translation_error(best.transform.t, t_gt.t)
            metrics = {
                "ir": inlier_ratio(corrs, t_gt, cfg.thresholds.tau_ir),
                "rmse": rmse(corrs, best.transform),
                "re_deg": re_deg,
                "te_m": te_m,
                "registered": bool(
                    re_deg < cfg.thresholds.tau_r_deg and te_m < cfg.thresholds.tau_t
                ),
            }

    timings["total"] = sum(timings.values())
    report = RunReport(
        pair=pair_name,
        estimator=estimator,
        transform=best.transform,
        source=best.source,
        inliers=best.inlier_count,
        n_correspondences=len(fine),
        n_coarse=len(coarse),
        metrics=metrics,
        timings_ms=timings,
        extra={"config": config_to_dict(cfg), "seed": int(seed)},
    )
    return report, corrs, fine, down_p, down_q


def _pseudo_patches(src_points: np.ndarray, seed_unused=None) -> np.ndarray:
    """Spatial patch labels for correspondences that lack superpoint parents:
    nearest of n/16 (min 4) farthest-point anchors."""
    cloud = PointCloud(src_points)
    n_anchor = min(len(cloud), max(4, len(cloud) // 16))
    anchors = cloud.select(farthest_point_sample(cloud, n_anchor))
    return knn(anchors, cloud, 1).indices[:, 0]


def _oracle_correspondences(scene: Scene, n_corr: int, ir_target: float, rng) -> CorrespondenceSet:
    """Correspondence set with the requested inlier ratio: twins plus
    deliberately mismatched pairs, both carrying their oracle features."""
    n_in = int(round(n_corr * ir_target))
    n_out = n_corr - n_in
    if len(scene.corr_x) < n_in:
        raise DegenerateGeometryError("not enough overlap for the requested inlier count")
    pick = rng.choice(len(scene.corr_x), size=n_in, replace=False)
    xi = [scene.corr_x[pick]]
    yi = [scene.corr_y[pick]]
    tau = 0.0
    guard = 0
    while n_out > 0:
        guard += 1
        if guard > 200:
            raise DegenerateGeometryError("could not sample distant outlier pairs")
        cx = rng.integers(0, len(scene.p), size=2 * n_out)
        cy = rng.integers(0, len(scene.q), size=2 * n_out)
        residual = np.linalg.norm(scene.t_gt.apply(scene.p.points[cx]) - scene.q.points[cy], axis=1)
        far = residual > max(tau, 4.0 * scene.matching_radius)
        cx, cy = cx[far][:n_out], cy[far][:n_out]
        xi.append(cx)
        yi.append(cy)
        n_out -= len(cx)
    xi = np.concatenate(xi)
    yi = np.concatenate(yi)
    return CorrespondenceSet(
        src=scene.p.points[xi],
        dst=scene.q.points[yi],
        features=(scene.features_p[xi], scene.features_q[yi]),
    )


# ---------------------------------------------------------------- commands

@click.group()
def cli():
    """Rotation-equivariant point cloud registration toolkit."""


@cli.command("gen")
@click.option("--config", "config_path", default=None, help="JSON config file.")
@click.option("--preset", type=click.Choice(PRESETS), default="indoor")
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option("--count", type=click.IntRange(min=1), default=1)
@click.option("--oracle-channels", type=click.IntRange(min=0), default=0)
@click.option("--out", "out_path", required=True)
def cmd_gen(config_path, preset, seed, count, oracle_channels, out_path):
    """Generate synthetic scene pairs with ground truth."""
    cfg = load_config(config_path, preset)
    out = _out_dir(out_path)
    for i in range(count):
        scene_seed = seed + i
        scene = gen_scene(cfg.scene, scene_seed, oracle_channels=oracle_channels)
        pair_dir = out / f"scene{scene_seed:06d}"
        pair_dir.mkdir(exist_ok=True)
        write_ply(scene.p, pair_dir / "p.ply")
        write_ply(scene.q, pair_dir / "q.ply")
        write_transform(scene.t_gt, pair_dir / "t_gt.json")
        write_correspondences_csv(
            scene.corr_x, scene.corr_y, np.ones(len(scene.corr_x)), pair_dir / "corr.csv"
        )
        if oracle_channels:
            np.save(pair_dir / "features_p.npy", scene.features_p)
            np.save(pair_dir / "features_q.npy", scene.features_q)
        write_json(
            {
                "config": config_to_dict(cfg),
                "matching_radius": scene.matching_radius,
                "n_p": len(scene.p),
                "n_q": len(scene.q),
                "n_twins": len(scene.corr_x),
                "overlap": scene.overlap,
                "seed": scene_seed,
            },
            pair_dir / "meta.json",
        )
        click.echo(f"{pair_dir}: {len(scene.p)}+{len(scene.q)} points, overlap {scene.overlap:.3f}")


@cli.command("register")
@click.option("--config", "config_path", default=None)
@click.option("--preset", type=click.Choice(PRESETS), default="indoor")
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option("--p", "p_path", default=None, help="Source cloud (.ply or .xyz).")
@click.option("--q", "q_path", default=None, help="Target cloud (.ply or .xyz).")
@click.option("--gt", "gt_path", default=None, help="Ground-truth transform JSON.")
@click.option("--scene-seed", type=click.IntRange(min=0), default=None, help="Generate the pair instead of reading files.")
@click.option("--estimator", type=click.Choice(ESTIMATORS), default="feature")
@click.option("--budget", type=click.IntRange(min=1), default=None)
@click.option("--weights", "weights_path", default=None, help="Weight container to load.")
@click.option("--out", "out_path", required=True)
def cmd_register(
    config_path, preset, seed, p_path, q_path, gt_path, scene_seed, estimator, budget,
    weights_path, out_path,
):
    """Register one pair and report transform, metrics, and timings."""
    cfg = load_config(config_path, preset)
    if budget is not None:
        from dataclasses import replace

        cfg = replace(cfg, estimator=replace(cfg.estimator, budget=budget))
    out = _out_dir(out_path)

    with _stage("inputs"):
        if scene_seed is not None:
            scene = gen_scene(cfg.scene, scene_seed)
            cloud_p, cloud_q, t_gt = scene.p, scene.q, scene.t_gt
            pair_name = f"scene{scene_seed:06d}"
        else:
            if p_path is None or q_path is None:
                raise InputError("provide --p and --q, or --scene-seed")
            cloud_p = _read_cloud(p_path)
            cloud_q = _read_cloud(q_path)
            t_gt = read_transform(gt_path) if gt_path else None
            pair_name = f"{Path(p_path).stem}:{Path(q_path).stem}"

    report, corrs, fine, down_p, down_q = _register_pair(
        cfg, cloud_p, cloud_q, t_gt, estimator, seed, pair_name, weights_path
    )
    write_report(report, out / "report.json")
    write_correspondences_csv(fine.x, fine.y, fine.scores, out / "correspondences.csv")
    write_ply(down_p, out / "p_down.ply")
    write_ply(down_q, out / "q_down.ply")
    aligned = PointCloud(report.transform.apply(down_p.points))
    write_ply(aligned, out / "p_aligned.ply")
    render_register_figure(down_p, down_q, report.transform, out / "register.png")
    if report.metrics is not None:
        click.echo(
            f"{pair_name}: RE {report.metrics['re_deg']:.4f} deg, "
            f"TE {report.metrics['te_m']:.4f} m, inliers {report.inliers}"
        )
    else:
        click.echo(f"{pair_name}: inliers {report.inliers} (no ground truth)")


@cli.command("benchmark")
@click.option("--config", "config_path", default=None)
@click.option("--preset", type=click.Choice(PRESETS), default="indoor")
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option("--estimators", default="feature,ransac,lgr")
@click.option("--budgets", default="50,100,500,1000")
@click.option("--scenes", type=click.IntRange(min=1), default=200)
@click.option("--inlier-ratio", type=float, default=0.3)
@click.option("--n-corr", type=click.IntRange(min=4), default=100)
@click.option("--oracle-channels", type=click.IntRange(min=2), default=8)
@click.option("--out", "out_path", required=True)
def cmd_benchmark(
    config_path, preset, seed, estimators, budgets, scenes, inlier_ratio, n_corr,
    oracle_channels, out_path,
):
    """Estimator comparison on oracle-feature scenes (success rate vs budget)."""
    cfg = load_config(config_path, preset)
    est_list = [e.strip() for e in estimators.split(",") if e.strip()]
    if not est_list:
        raise InputError("empty estimator list")
    for e in est_list:
        if e not in ESTIMATORS:
            raise InputError(f"unknown estimator '{e}'")
    try:
        budget_list = [int(b) for b in budgets.split(",") if b.strip()]
    except ValueError as exc:
        raise InputError(f"bad budget list: {exc}") from exc
    if not budget_list or min(budget_list) < 1:
        raise InputError("budgets must be positive integers")
    if not 0.0 < inlier_ratio <= 1.0:
        raise InputError("inlier ratio must lie in (0, 1]")
    out = _out_dir(out_path)

    cases = []
    for i in range(scenes):
        scene_seed = seed + i
        scene = gen_scene(cfg.scene, scene_seed, oracle_channels=oracle_channels)
        rng = np.random.default_rng(scene_seed + 777_000_000)
        corrs = _oracle_correspondences(scene, n_corr, inlier_ratio, rng)
        cases.append((scene, corrs, _pseudo_patches(corrs.src)))

    from dataclasses import replace

    rows = []
    for estimator in est_list:
        for budget in budget_list:
            est_cfg = replace(cfg.estimator, budget=budget)
            succ, res, tes, ms = [], [], [], []
            for i, (scene, corrs, patches) in enumerate(cases):
                t0 = time.monotonic()
                try:
                    best = _estimate(corrs, patches, estimator, est_cfg, seed + i)
                except DegenerateGeometryError:
                    succ.append(False)
                    ms.append((time.monotonic() - t0) * 1e3)
                    continue
                ms.append((time.monotonic() - t0) * 1e3)
                re_deg = rotation_error(best.transform.r.m, scene.t_gt.r.m)
                te_m = translation_error(best.transform.t, scene.t_gt.t)
                ok = re_deg < cfg.thresholds.tau_r_deg and te_m < cfg.thresholds.tau_t
                succ.append(ok)
                if ok:
                    res.append(re_deg)
                    tes.append(te_m)
            rows.append(
                {
                    "estimator": estimator,
                    "budget": budget,
                    "success": float(np.mean(succ)),
                    "mean_re": float(np.mean(res)) if res else float("nan"),
                    "mean_te": float(np.mean(tes)) if tes else float("nan"),
                    "ms": float(np.mean(ms)),
                }
            )
            click.echo(
                f"{rows[-1]['estimator']:>8} budget {budget:>5}: "
                f"success {rows[-1]['success']:.3f}"
            )

    write_benchmark_csv(rows, out / "benchmark.csv")
    render_benchmark_figure(rows, out / "benchmark.png")
    write_json(
        {
            "config": config_to_dict(cfg),
            "estimators": est_list,
            "budgets": budget_list,
            "inlier_ratio": inlier_ratio,
            "n_corr": n_corr,
            "oracle_channels": oracle_channels,
            "scenes": scenes,
            "seed": seed,
        },
        out / "meta.json",
    )


@cli.command("eval")
@click.option("--config", "config_path", default=None)
@click.option("--preset", type=click.Choice(PRESETS), default="indoor")
@click.option("--pred", "pred_path", required=True, help="Predictions JSON.")
@click.option("--gt", "gt_path", required=True, help="Ground-truth JSON.")
@click.option("--out", "out_path", required=True)
def cmd_eval(config_path, preset, pred_path, gt_path, out_path):
    """Aggregate the six metrics over stored per-pair results."""
    cfg = load_config(config_path, preset)
    out = _out_dir(out_path)
    from .io import transform_from_dict

    def pairs_of(obj, path):
        if not isinstance(obj, dict) or not isinstance(obj.get("pairs"), list):
            raise InputError(f"{path}: expected an object with a 'pairs' array")
        mapping = {}
        for i, rec in enumerate(obj["pairs"]):
            if "id" not in rec:
                raise InputError(f"{path}: pairs[{i}] has no 'id'")
            mapping[str(rec["id"])] = rec
        return mapping

    preds = pairs_of(read_json(pred_path), pred_path)
    gts = pairs_of(read_json(gt_path), gt_path)
    per_pair = {}
    for pid in sorted(preds):
        if pid not in gts:
            raise InputError(f"pair '{pid}' missing from {gt_path}")
        pred = preds[pid]
        t_est = transform_from_dict(pred.get("transform", {}))
        t_gt = transform_from_dict(gts[pid].get("transform", {}))
        corr = pred.get("correspondences")
        if not isinstance(corr, dict) or "src" not in corr or "dst" not in corr:
            raise InputError(f"pair '{pid}': predictions need correspondences src/dst")
        corrs = CorrespondenceSet(
            src=np.asarray(corr["src"], dtype=np.float64).reshape(-1, 3),
            dst=np.asarray(corr["dst"], dtype=np.float64).reshape(-1, 3),
        )
        per_pair[pid] = {
            "ir": inlier_ratio(corrs, t_gt, cfg.thresholds.tau_ir),
            "rmse": rmse(corrs, t_est),
            "re_deg": rotation_error(t_est.r.m, t_gt.r.m),
            "te_m": translation_error(t_est.t, t_gt.t),
        }
    aggregate = aggregate_metrics(per_pair, cfg.thresholds)
    write_json({"aggregate": aggregate, "per_pair": per_pair}, out / "eval.json")
    lines = ["id,ir,rmse,re_deg,te_m"]
    for pid in sorted(per_pair):
        m = per_pair[pid]
        lines.append(f"{pid},{m['ir']!r},{m['rmse']!r},{m['re_deg']!r},{m['te_m']!r}")
    (out / "eval_pairs.csv").write_text("\n".join(lines) + "\n")
    render_eval_figure(aggregate, out / "eval.png")
    click.echo(
        f"fmr {aggregate['fmr']:.3f} rr {aggregate['rr']:.3f} tr {aggregate['tr']:.3f}"
    )


@cli.command("weights")
@click.option("--config", "config_path", default=None)
@click.option("--preset", type=click.Choice(PRESETS), default="indoor")
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option("--check", "check_path", default=None, help="Validate an existing container.")
@click.option("--out", "out_path", required=True)
def cmd_weights(config_path, preset, seed, check_path, out_path):
    """Create (or validate) a weight container for the active config."""
    cfg = load_config(config_path, preset)
    out = _out_dir(out_path)
    if check_path is not None:
        params_from_records(cfg, load_weights(check_path))
        click.echo(f"{check_path}: layout valid for preset '{cfg.preset}'")
        return
    records = params_to_records(*init_pipeline_params(cfg, seed))
    path = out / "weights.bin"
    save_weights(records, path)
    layout = hashlib.sha256()
    payload = hashlib.sha256()
    n_params = 0
    for name in records:
        arr = np.ascontiguousarray(records[name], dtype="<f4")
        layout.update(f"{name}:{arr.shape};".encode())
        payload.update(arr.tobytes())
        n_params += arr.size
    write_json(
        {
            "layout_sha256": layout.hexdigest(),
            "n_parameters": int(n_params),
            "n_records": len(records),
            "payload_sha256": payload.hexdigest(),
            "seed": int(seed),
        },
        out / "meta.json",
    )
    click.echo(f"{path}: {len(records)} records, {n_params} parameters")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except DegenerateGeometryError as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
