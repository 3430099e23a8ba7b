"""Command-line driver for the preference-aligned navigation pipeline.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from prefnav.errors import ConfigurationError, UsageError
from prefnav.fileio import write_ppm
from prefnav.geometry import CameraModel, Pose2, bev_project
from prefnav.planner import PlanConfig, render_costmap, write_cost_table
from prefnav.preference import (
    Ranking,
    UtilityModel,
    export_exemplars,
    kmeans_fit,
    parse_ranking,
    select_k,
    train_utility,
)
from prefnav.selfsup import SterlingModel, TrainConfig, train, write_history_csv
from prefnav.simworld import (
    ENVIRONMENTS,
    EpisodeLog,
    PlannerBundle,
    TerrainMap,
    collect,
    default_terrains,
    evaluate,
    generate_world,
    load_dataset,
    load_world,
    make_env,
    render_camera,
    save_dataset,
    save_world,
)
from prefnav.simworld.rollout import samples_from_log
from prefnav.pipeline import EVAL_ALPHA, last_view_pixels, to_training

log = logging.getLogger("prefnav")

DEFAULT_CONFIG: dict = {
    "world": {"dims": [64, 64], "cell_size": 0.25, "regions_per_terrain": 3, "seed": 0},
    "collect": {"policy": "random-walk", "duration": 60.0, "seed": 0},
    "train": {
        "epochs": 50,
        "batch_size": 128,
        "lr": 3e-4,
        "weight_decay": 5e-5,
        "ablation": "COMBINED",
        "checkpoint_every": 10,
        "seed": 0,
    },
    "cluster": {"k": None, "k_min": 2, "k_max": 8, "exemplars": 5, "seed": 0},
    "utility": {"epochs": 100, "batch_size": 128, "lr": 3e-4, "margin": 1.0, "seed": 0},
    "planner": {
        "alpha": EVAL_ALPHA,
        "gamma": 0.8,
        "num_arcs": 21,
        "kappa_max": 1.0,
        "arc_length": 4.0,
        "n_segments": 9,
    },
    "eval": {"env": "detour", "trials": 5, "seed": 0, "use_memory": True},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigurationError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    return _merge(DEFAULT_CONFIG, doc)


def _seed(args, cfg: dict, section: str) -> int:
    return int(args.seed) if args.seed is not None else int(cfg[section]["seed"])


def _write_json(path: str | Path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _plan_config(args, cfg: dict) -> PlanConfig:
    p = dict(cfg["planner"])
    if getattr(args, "alpha", None) is not None:
        p["alpha"] = args.alpha
    return PlanConfig(**p)


def _load_model(path: str) -> SterlingModel:
    return SterlingModel.load(path)


# ---------------------------------------------------------------- subcommands


def cmd_gen_world(args, cfg) -> int:
    if args.emit_config:
        _write_json(args.emit_config, DEFAULT_CONFIG)
        print(f"wrote config template to {args.emit_config}")
        return 0
    if not args.output:
        raise UsageError("gen-world needs -o/--output (or --emit-config)")
    w = cfg["world"]
    specs = default_terrains()
    world = generate_world(specs, tuple(w["dims"]), w["cell_size"], _seed(args, cfg, "world"), w["regions_per_terrain"])
    save_world(args.output, world, specs)
    print(f"wrote {args.output} ({world.dims[0]}x{world.dims[1]} cells)")
    return 0


def cmd_collect(args, cfg) -> int:
    c = cfg["collect"]
    if args.world:
        world, specs = load_world(args.world)
    else:
        specs = default_terrains()
        if args.terrain is None:
            raise UsageError("collect needs --world or --terrain")
        names = [s.name for s in specs]
        if args.terrain not in names:
            raise ConfigurationError(f"unknown terrain {args.terrain!r}; choose from {names}")
        k = names.index(args.terrain)
        world = TerrainMap(np.full(tuple(cfg["world"]["dims"]), k, dtype=np.int16), cfg["world"]["cell_size"], seed=k)
    ep = collect(world, specs, args.policy or c["policy"], args.duration if args.duration is not None else c["duration"], _seed(args, cfg, "collect"))
    ep.save(args.output)
    print(f"wrote {len(ep.frames)} frames to {args.output}; {len(ep.events)} boundary reflections")
    return 0


def cmd_build_dataset(args, cfg) -> int:
    world = load_world(args.world)[0] if args.world else None
    samples = []
    for i, d in enumerate(args.logs):
        samples.extend(samples_from_log(EpisodeLog.load(d), world, i))
    save_dataset(args.output, samples)
    print(f"wrote {len(samples)} samples to {args.output}")
    return 0


def cmd_train_repr(args, cfg) -> int:
    t = dict(cfg["train"])
    if args.ablation:
        t["ablation"] = args.ablation
    if args.epochs is not None:
        t["epochs"] = args.epochs
    t["seed"] = _seed(args, cfg, "train")
    samples = load_dataset(args.dataset)
    train_samples, stats = to_training(samples)
    res = train(train_samples, TrainConfig(**t), checkpoint_dir=args.checkpoints)
    res.model.save(args.output)
    _write_json(Path(args.output).with_suffix(".norm.json"), stats.to_json())
    if args.history:
        write_history_csv(args.history, res.history)
    last = res.history[-1] if res.history else None
    print(f"wrote {args.output}" + (f"; final loss {last.total:.4f}" if last else ""))
    return 0


def _embeddings(model: SterlingModel, dataset: str) -> tuple[np.ndarray, np.ndarray, list]:
    samples = load_dataset(dataset)
    pixels = last_view_pixels(samples)
    return model.encode_visual(pixels), pixels, samples


def cmd_cluster(args, cfg) -> int:
    c = cfg["cluster"]
    seed = _seed(args, cfg, "cluster")
    model = _load_model(args.model)
    emb, pixels, _ = _embeddings(model, args.dataset)
    k = args.k if args.k is not None else c["k"]
    scores = {}
    if k is None:
        k, scores = select_k(emb, range(c["k_min"], c["k_max"] + 1), seed)
    cm, assign = kmeans_fit(emb, int(k), seed)
    doc = {"clusters": cm.to_json(), "assignments": assign.tolist(), "silhouette": {str(a): b for a, b in scores.items()}}
    _write_json(args.output, doc)
    if args.exemplars:
        export_exemplars(cm, assign, emb, pixels, args.exemplars, c["exemplars"])
    print(f"k={cm.k}; wrote {args.output}")
    return 0


def rank_interactive(manifest_path: str, ranking_text: str | None = None, stdin=None, stdout=None) -> Ranking:
    """Show exemplar files per cluster and read one ranking string.

    With ``ranking_text`` (scripted mode) a bad string raises; interactively
    the prompt repeats until the string parses.
    """
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    manifest = json.loads(Path(manifest_path).read_text())
    k = int(manifest["k"])
    base = Path(manifest_path).parent
    for entry in manifest["clusters"]:
        files = [str(base / e["file"]) for e in entry["exemplars"]]
        print(f"cluster {entry['id']} ({entry['size']} patches): " + " ".join(files), file=stdout)
    if ranking_text is not None:
        return parse_ranking(ranking_text, k)
    while True:
        print(f"rank clusters 0..{k - 1}, best first (e.g. 2>0=1>3): ", end="", file=stdout, flush=True)
        line = stdin.readline()
        if not line:
            raise UsageError("no ranking given")
        try:
            return parse_ranking(line.strip(), k)
        except ConfigurationError as e:
            print(f"error: {e}", file=stdout)


def cmd_rank(args, cfg) -> int:
    ranking = rank_interactive(args.manifest, args.ranking)
    _write_json(args.output, ranking.to_json())
    print(f"ranking {ranking.to_string()} -> {args.output}")
    return 0


def cmd_train_utility(args, cfg) -> int:
    u = cfg["utility"]
    model = _load_model(args.model)
    emb, _, _ = _embeddings(model, args.dataset)
    clusters = json.loads(Path(args.clusters).read_text())
    assign = np.asarray(clusters["assignments"])
    if len(assign) != len(emb):
        raise ConfigurationError("cluster assignments do not match the dataset")
    ranking = Ranking.from_json(json.loads(Path(args.ranking).read_text()))
    util = train_utility(
        emb, assign, ranking, seed=_seed(args, cfg, "utility"), epochs=u["epochs"], batch_size=u["batch_size"], lr=u["lr"], margin=u["margin"]
    )
    util.save(args.output)
    print(f"wrote {args.output}")
    return 0


def cmd_eval(args, cfg) -> int:
    e = cfg["eval"]
    env = make_env(args.env or e["env"])
    plan_cfg = _plan_config(args, cfg)
    if args.geometric_only:
        bundle = PlannerBundle(cfg=plan_cfg)
    else:
        if not (args.model and args.utility):
            raise UsageError("eval needs --model and --utility (or --geometric-only)")
        bundle = PlannerBundle(cfg=plan_cfg, model=_load_model(args.model), utility=UtilityModel.load(args.utility), use_memory=e["use_memory"])
    ranking = parse_ranking(args.terrain_ranking, len(env.specs)) if args.terrain_ranking else env.ranking
    trials = args.trials if args.trials is not None else e["trials"]
    res = evaluate(env.world, env.specs, bundle, ranking, env.start, env.goal, trials, _seed(args, cfg, "eval"))
    print(f"{env.name}: {res.successes}/{trials} successes (reference {res.reference.length:.2f} m)")
    if args.output:
        _write_json(
            args.output,
            {
                "env": env.name,
                "successes": res.successes,
                "trials": [
                    {
                        "seed": t.seed,
                        "success": t.success,
                        "reached": t.reached,
                        "violated": t.violated,
                        "path_length": t.path_length,
                        "trajectory": np.round(t.trajectory, 4).tolist(),
                    }
                    for t in res.trials
                ],
            },
        )
    return 0


def cmd_costmap(args, cfg) -> int:
    if args.world:
        world, specs = load_world(args.world)
    else:
        env = make_env(args.env or cfg["eval"]["env"])
        world, specs = env.world, env.specs
    pose = Pose2(*args.pose)
    cam = CameraModel()
    frame = render_camera(world, specs, pose, cam, noise_seed=_seed(args, cfg, "eval"))
    bev = bev_project(cam, frame, pose)
    model = _load_model(args.model)
    util = UtilityModel.load(args.utility)
    cm = render_costmap(bev, model.encode_visual, util, stride=args.stride)
    out = Path(args.output)
    cm.write(out, out.with_suffix(".invalid.pbm"))
    if args.bev:
        write_ppm(args.bev, bev.pixels)
    if args.arcs:
        from prefnav.planner import plan

        write_cost_table(args.arcs, plan(pose, Pose2(*args.goal), bev, model.encode_visual, util, _plan_config(args, cfg)))
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from prefnav.gradcheck import run_all

    results, elapsed = run_all(seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max rel error {r.max_rel_error:.2e} (tol {r.tol:.0e}, {r.n_checked} coords)")
    print(f"{elapsed:.1f} s")
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prefnav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="pipeline config JSON (see gen-world --emit-config)")
        sp.add_argument("--seed", type=int, help="override the section's seed")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-world", cmd_gen_world, "generate a seeded terrain world")
    sp.add_argument("-o", "--output")
    sp.add_argument("--emit-config", metavar="PATH", help="write the default config template and exit")

    sp = add("collect", cmd_collect, "record a rollout log")
    sp.add_argument("--world")
    sp.add_argument("--terrain", help="record on a uniform world of this terrain instead of --world")
    sp.add_argument("--policy", choices=["random-walk", "waypoint"])
    sp.add_argument("--duration", type=float)
    sp.add_argument("-o", "--output", required=True)

    sp = add("build-dataset", cmd_build_dataset, "pair patches with IPT windows")
    sp.add_argument("--logs", nargs="+", required=True)
    sp.add_argument("--world", help="label samples from this world instead of the logged track")
    sp.add_argument("-o", "--output", required=True)

    sp = add("train-repr", cmd_train_repr, "train the visual and IPT encoders")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--ablation", choices=["VI_ONLY", "MM_ONLY", "COMBINED"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--history", help="per-epoch loss CSV")
    sp.add_argument("--checkpoints", help="directory for periodic checkpoints")
    sp.add_argument("-o", "--output", required=True)

    sp = add("cluster", cmd_cluster, "k-means on visual embeddings")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--k", type=int, help="fixed k (default: silhouette selection)")
    sp.add_argument("--exemplars", help="directory for exemplar patches and manifest")
    sp.add_argument("-o", "--output", required=True)

    sp = add("rank", cmd_rank, "rank clusters from their exemplars")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ranking", help='scripted ranking such as "2>0=1>3"')
    sp.add_argument("-o", "--output", required=True)

    sp = add("train-utility", cmd_train_utility, "fit the utility from a cluster ranking")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--clusters", required=True)
    sp.add_argument("--ranking", required=True)
    sp.add_argument("-o", "--output", required=True)

    sp = add("eval", cmd_eval, "closed-loop evaluation on a built-in environment")
    sp.add_argument("--env", choices=ENVIRONMENTS)
    sp.add_argument("--model")
    sp.add_argument("--utility")
    sp.add_argument("--geometric-only", action="store_true")
    sp.add_argument("--terrain-ranking", help="operator preference over terrain ids (default: the environment's)")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--alpha", type=float, help="progress weight; 1 ignores terrain (default: planner.alpha)")
    sp.add_argument("-o", "--output", help="trajectories JSON")

    sp = add("costmap", cmd_costmap, "render a terrain cost map from one camera view")
    sp.add_argument("--world")
    sp.add_argument("--env", choices=ENVIRONMENTS)
    sp.add_argument("--pose", type=float, nargs=3, required=True, metavar=("X", "Y", "THETA"))
    sp.add_argument("--goal", type=float, nargs=3, default=[21.0, 8.0, 0.0], metavar=("X", "Y", "THETA"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--utility", required=True)
    sp.add_argument("--stride", type=int, default=10)
    sp.add_argument("--bev", help="also write the BEV image (PPM)")
    sp.add_argument("--arcs", help="also write the per-arc cost table (CSV)")
    sp.add_argument("--alpha", type=float, help="progress weight for the arc table (default: planner.alpha)")
    sp.add_argument("-o", "--output", required=True)

    add("gradcheck", cmd_gradcheck, "finite-difference checks of layers and the full objective")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except (ConfigurationError, UsageError) as e:
        print(f"prefnav {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ArithmeticError, RuntimeError, ValueError, KeyError) as e:
        print(f"prefnav {args.command}: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
