"""``deepsnake`` command line: gen, train, eval, ablate, bench and render.

Settings come from an INI file with one section per module (``[data]``,
``[net]``, ``[train]``, ``[eval]``, ``[ablate]``, ``[bench]``, ``[render]``),
then from ``--set section.key=value`` overrides.  Unknown sections or keys are
rejected.  Every command writes the effective configuration next to its
outputs as ``effective_config.ini``; running any command again with that file
alone reproduces it.  Relative paths resolve against ``--workdir``.

Errors print one JSON line to stderr and exit with 2 (configuration),
3 (incompatible checkpoint) or 4 (file system).  ``DEEPSNAKE_LOG`` sets the
log level (default ``WARNING``).
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps timings comparable and summation order fixed
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import configparser  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402

import numpy as np  # noqa: E402

from . import harness as hn  # noqa: E402
from . import synthdata as sd  # noqa: E402
from .autodiff import atomic_write_bytes  # noqa: E402
from .geometry import polygon_iou  # noqa: E402
from .pipeline import segment_batch  # noqa: E402
from .snakenet import SnakeNetConfig  # noqa: E402

log = logging.getLogger("deepsnake")

EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_IO = 2, 3, 4

DEFAULT_CONFIG = """\
[data]
seed = 0
train_count = 2000
eval_count = 200
kind_mix = ellipse:1,polygon:1,blob:1
max_rel = 0.1
cache_dir = cache
workers = 1

[net]
state_dim = 64
kernel_size = 9
backbone_depth = 8
conv_kind = circular
fusion_dim = 128
head_hidden = 64
feature_channels = 4
coord_scale = bbox

[train]
epochs = 8
batch_size = 8
lr = 1e-4
lr_decay_epochs = 4,6
lr_decay = 0.5
iterations = 3
rng_seed = 0
teacher_forcing = true
out_dir = run

[eval]
checkpoint = run/best.ckpt
split = eval
exact_boxes = false
out_dir = run/eval

[ablate]
seeds = 0,1,2
max_iterations = 5
out_dir = run/ablate

[bench]
checkpoint = run/best.ckpt
n_repeats = 50
warmup = 5
dtype = float32
out_dir = run/bench

[render]
checkpoint = run/best.ckpt
split = eval
seeds =
count = 4
scale = 4
out_dir = run/render
"""

# colours used by every rendered layer (PNG, SVG and the JSON trace)
LEGEND = {
    "gt": "#2ca02c",
    "box": "#ffd700",
    "diamond": "#17becf",
    "extremes": "#e377c2",
    "octagon": "#ff7f0e",
    "iteration": "#6baed6",
    "final": "#d62728",
}


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind, self.message = code, kind, message


# ------------------------------------------------------------------ parsing


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _mix(s):
    out = {}
    for part in s.split(","):
        name, _, w = part.partition(":")
        name = name.strip()
        if name not in sd.KINDS:
            raise ValueError(f"unknown shape kind {name!r}")
        out[name] = float(w)
    return out


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return parse


def _opt_path(s):
    return s or None


SCHEMA = {
    "data": {"seed": int, "train_count": int, "eval_count": int, "kind_mix": _mix, "max_rel": float,
             "cache_dir": _opt_path, "workers": int},
    "net": {"state_dim": int, "kernel_size": int, "backbone_depth": int,
            "conv_kind": _choice("circular", "graph"), "fusion_dim": int, "head_hidden": int,
            "feature_channels": int, "coord_scale": _choice("bbox", "none")},
    "train": {"epochs": int, "batch_size": int, "lr": float, "lr_decay_epochs": _ints, "lr_decay": float,
              "iterations": int, "rng_seed": int, "teacher_forcing": _bool, "out_dir": str},
    "eval": {"checkpoint": str, "split": _choice("train", "eval"), "exact_boxes": _bool, "out_dir": str},
    "ablate": {"seeds": _ints, "max_iterations": int, "out_dir": str},
    "bench": {"checkpoint": str, "n_repeats": int, "warmup": int, "dtype": _choice("float32", "float64"),
              "out_dir": str},
    "render": {"checkpoint": str, "split": _choice("train", "eval"), "seeds": _ints, "count": int,
               "scale": int, "out_dir": str},
}


def _new_parser():
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    return cp


def _check_keys(cp, origin):
    for section in cp.sections():
        if section not in SCHEMA:
            raise CliError(EXIT_CONFIG, "config", f"unknown section [{section}] in {origin}")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise CliError(EXIT_CONFIG, "config", f"unknown key [{section}] {key} in {origin}")


def load_config(path=None, overrides=()):
    """Merged raw configuration: defaults, then ``path``, then ``section.key=value`` overrides."""
    cp = _new_parser()
    cp.read_string(DEFAULT_CONFIG)
    if path:
        user = _new_parser()
        try:
            with open(path) as fh:
                user.read_file(fh)
        except OSError as e:
            raise CliError(EXIT_IO, "io", f"cannot read config {path}: {e.strerror}") from e
        except configparser.Error as e:
            raise CliError(EXIT_CONFIG, "config", f"malformed config {path}: {e.message}") from e
        _check_keys(user, path)
        cp.read_dict(user)
    for item in overrides:
        key, eq, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not eq or not dot:
            raise CliError(EXIT_CONFIG, "config", f"override {item!r} is not section.key=value")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise CliError(EXIT_CONFIG, "config", f"unknown key [{section}] {name} in --set")
        cp[section][name] = value.strip()
    return cp


def typed(cp):
    """Parse every value with its schema type."""
    out = {}
    for section, keys in SCHEMA.items():
        out[section] = {}
        for key, parse in keys.items():
            raw = cp[section][key]
            try:
                out[section][key] = parse(raw)
            except ValueError as e:
                raise CliError(EXIT_CONFIG, "config", f"bad value for [{section}] {key}: {e}") from e
    return out


def config_text(cp):
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def train_config(cfg, out_dir=None) -> hn.TrainConfig:
    d, t = cfg["data"], cfg["train"]
    try:
        return hn.TrainConfig(
            data_seed=d["seed"], train_count=d["train_count"], eval_count=d["eval_count"],
            kind_mix=d["kind_mix"], max_rel=d["max_rel"], epochs=t["epochs"], batch_size=t["batch_size"],
            lr=t["lr"], lr_decay_epochs=t["lr_decay_epochs"], lr_decay=t["lr_decay"],
            iterations=t["iterations"], rng_seed=t["rng_seed"], teacher_forcing=t["teacher_forcing"],
            net=net_config(cfg), out_dir=out_dir or t["out_dir"], cache_dir=d["cache_dir"])
    except ValueError as e:
        raise CliError(EXIT_CONFIG, "config", str(e)) from e


def net_config(cfg) -> SnakeNetConfig:
    try:
        return SnakeNetConfig(**cfg["net"])
    except ValueError as e:
        raise CliError(EXIT_CONFIG, "config", f"[net] {e}") from e


# ----------------------------------------------------------------- helpers


def _echo(cp, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_bytes(os.path.join(out_dir, "effective_config.ini"), config_text(cp).encode())


def _load_models(cfg, path):
    if not os.path.exists(path):
        raise CliError(EXIT_IO, "io", f"checkpoint not found: {path}")
    try:
        models, ck_config, _, _ = hn.load_checkpoint(path, expect_net=net_config(cfg))
    except hn.CheckpointError as e:
        raise CliError(EXIT_CHECKPOINT, "checkpoint", str(e)) from e
    return models, ck_config


def _split_samples(cfg, split, seeds=None, count=None):
    d = cfg["data"]
    if seeds is None:
        n = d["eval_count"] if split == "eval" else d["train_count"]
        seeds = sd.sample_seeds(d["seed"], n if count is None else min(count, n), split)
    return sd.load_or_make(d["cache_dir"], seeds, d["kind_mix"], d["max_rel"])


# ---------------------------------------------------------------- commands


def cmd_gen(cp, cfg):
    d = cfg["data"]
    cache = d["cache_dir"]
    if not cache:
        raise CliError(EXIT_CONFIG, "config", "[data] cache_dir must be set for gen")
    seeds = (sd.sample_seeds(d["seed"], d["train_count"], "train")
             + sd.sample_seeds(d["seed"], d["eval_count"], "eval"))
    params = sd.gen_params(d["kind_mix"], d["max_rel"])
    todo = [s for s in seeds if sd.load_sample(cache, s, params) is None]
    os.makedirs(cache, exist_ok=True)
    args = [(s, d["kind_mix"], d["max_rel"]) for s in todo]
    if d["workers"] > 1:
        with ProcessPoolExecutor(d["workers"]) as pool:
            samples = pool.map(_make_sample_args, args, chunksize=16)
            for s in samples:
                sd.save_sample(cache, s, params)
    else:
        for a in args:
            sd.save_sample(cache, _make_sample_args(a), params)
    _echo(cp, cache)
    return {"cache_dir": cache, "samples": len(seeds), "generated": len(todo)}


def _make_sample_args(a):
    return sd.make_sample(*a)


def cmd_train(cp, cfg):
    tc = train_config(cfg)
    _echo(cp, tc.out_dir)
    res = hn.train(tc)
    return {"final": res.final_checkpoint, "best": res.best_checkpoint, "log": res.log_path,
            "best_eval_iou": res.best_iou}


def cmd_eval(cp, cfg):
    e = cfg["eval"]
    models, ck = _load_models(cfg, e["checkpoint"])
    samples = _split_samples(cfg, e["split"])
    iterations = cfg["train"]["iterations"]
    report = hn.evaluate(models, samples, iterations, use_jitter=not e["exact_boxes"])
    _echo(cp, e["out_dir"])
    hn.write_text(os.path.join(e["out_dir"], "eval.csv"), report.csv())
    hn.write_text(os.path.join(e["out_dir"], "eval_per_sample.csv"), report.per_sample_csv())
    hn.write_text(os.path.join(e["out_dir"], "timing.json"), json.dumps(report.timing_ms, indent=1) + "\n")
    return {"samples": len(samples), "iterations": iterations,
            "mean_iou": [report.mean_iou(t) for t in range(iterations + 1)]}


def cmd_ablate(cp, cfg):
    a = cfg["ablate"]
    _echo(cp, a["out_dir"])
    table, per_seed = hn.ablate(train_config(cfg, out_dir=a["out_dir"]), seeds=a["seeds"],
                                max_iterations=a["max_iterations"])
    hn.write_text(os.path.join(a["out_dir"], "ablation.csv"), hn.ablation_csv(table))
    rows = [{"conv_kind": k, "seed": s, **{f"iter{t + 1}": v for t, v in enumerate(vals)}}
            for k, runs in per_seed.items() for s, vals in zip(a["seeds"], runs)]
    fields = ["conv_kind", "seed"] + [f"iter{t}" for t in range(1, a["max_iterations"] + 1)]
    hn.write_text(os.path.join(a["out_dir"], "ablation_per_seed.csv"), hn._csv_text(fields, rows))
    return {"table": table}


def cmd_bench(cp, cfg):
    b = cfg["bench"]
    models, _ = _load_models(cfg, b["checkpoint"])
    samples = _split_samples(cfg, "eval", count=1)
    rows = hn.bench(models, samples, n_repeats=b["n_repeats"], warmup=b["warmup"],
                    iterations=cfg["train"]["iterations"], dtype=np.dtype(b["dtype"]))
    _echo(cp, b["out_dir"])
    hn.write_text(os.path.join(b["out_dir"], "bench.csv"), hn.bench_csv(rows))
    return {"rows": [{k: v for k, v in r.items() if k != "times_ms"} for r in rows]}


def cmd_render(cp, cfg):
    r = cfg["render"]
    models, _ = _load_models(cfg, r["checkpoint"])
    seeds = list(r["seeds"]) or None
    samples = _split_samples(cfg, r["split"], seeds=seeds, count=r["count"])
    iterations = cfg["train"]["iterations"]
    props, traces = segment_batch([s.jittered_box for s in samples], [s.features for s in samples],
                                  models.proposal, models.deform, iterations)
    _echo(cp, r["out_dir"])
    written = []
    for s, p, tr in zip(samples, props, traces):
        scene = render_scene(s, p, tr)
        base = os.path.join(r["out_dir"], f"sample_{s.seed}")
        atomic_write_bytes(base + ".json", json.dumps(scene, indent=1).encode())
        atomic_write_bytes(base + ".svg", scene_svg(scene, r["scale"]).encode())
        atomic_write_bytes(base + ".png", scene_png(scene, s.features.data, r["scale"]))
        written.append(base)
    return {"rendered": written}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "bench": cmd_bench, "render": cmd_render}


# --------------------------------------------------------------- rendering


def _pts(a):
    return [[float(x), float(y)] for x, y in np.asarray(a)]


def render_scene(sample, proposal, trace):
    """Layered description of one segmentation, in drawing order."""
    b = sample.jittered_box
    box = [[b.x_min, b.y_min], [b.x_max, b.y_min], [b.x_max, b.y_max], [b.x_min, b.y_max]]
    contours = trace.contours
    layers = [
        {"name": "gt", "kind": "polygon", "points": _pts(sample.gt_polygon)},
        {"name": "box", "kind": "polygon", "points": box},
        {"name": "diamond", "kind": "polygon", "points": _pts(proposal.diamond40)},
        {"name": "octagon", "kind": "polygon", "points": _pts(proposal.octagon)},
    ]
    for t, c in enumerate(contours[1:], 1):
        layers.append({"name": "final" if t == len(contours) - 1 else "iteration", "iteration": t,
                       "kind": "polygon", "points": _pts(c)})
    layers.append({"name": "extremes", "kind": "points", "points": _pts(proposal.predicted_extremes.as_array())})
    for layer in layers:
        layer["color"] = LEGEND[layer["name"]]
    return {
        "seed": sample.seed,
        "kind": sample.kind,
        "extent": [sample.features.W, sample.features.H],
        "legend": LEGEND,
        "layers": layers,
        "octagon128": _pts(proposal.octagon128),
        "iou_per_iteration": [polygon_iou(c, sample.gt_polygon) for c in contours],
    }


def scene_svg(scene, scale):
    W, H = scene["extent"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * scale}" height="{H * scale}" '
           f'viewBox="-0.5 -0.5 {W} {H}">',
           f'<rect x="-0.5" y="-0.5" width="{W}" height="{H}" fill="black"/>']
    for layer in scene["layers"]:
        if layer["kind"] == "polygon":
            pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in layer["points"])
            out.append(f'<polygon class="{layer["name"]}" points="{pts}" fill="none" '
                       f'stroke="{layer["color"]}" stroke-width="{1.5 / scale:.3f}"/>')
        else:
            for x, y in layer["points"]:
                out.append(f'<circle class="{layer["name"]}" cx="{x:.3f}" cy="{y:.3f}" '
                           f'r="{3.0 / scale:.3f}" fill="{layer["color"]}"/>')
    out.append("</svg>\n")
    return "\n".join(out)


def scene_png(scene, features, scale):
    from PIL import Image, ImageDraw

    W, H = scene["extent"]
    mask = features[..., 0]
    edge = np.clip(features[..., 2] * 2, 0, 1)
    gray = (40 * mask + 60 * edge).astype(np.uint8)
    img = Image.fromarray(gray, mode="L").resize((W * scale, H * scale), Image.NEAREST).convert("RGB")
    draw = ImageDraw.Draw(img)

    def px(p):
        return ((p[0] + 0.5) * scale, (p[1] + 0.5) * scale)

    for layer in scene["layers"]:
        pts = [px(p) for p in layer["points"]]
        if layer["kind"] == "polygon":
            draw.line(pts + pts[:1], fill=layer["color"], width=2 if layer["name"] == "final" else 1)
        else:
            for x, y in pts:
                draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=layer["color"])
    y = 4
    for name, color in LEGEND.items():
        draw.rectangle([4, y, 14, y + 10], fill=color)
        draw.text((18, y - 1), name, fill="white")
        y += 14
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


# --------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, "usage", message)


def build_parser():
    p = _Parser(prog="deepsnake", description="Contour-based segmentation with a deep snake.")
    p.add_argument("--workdir", default=".", help="directory that relative paths resolve against")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", help="generate the dataset cache")
    sub.add_parser("train", help="train both snake stages")
    for name, text in (("eval", "evaluate a checkpoint"), ("bench", "time the pipeline stages"),
                       ("render", "draw the stage progression for some samples")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--checkpoint", help=f"shortcut for --set {name}.checkpoint=...")
        if name == "render":
            sp.add_argument("--seeds", help="comma-separated sample seeds")
    sub.add_parser("ablate", help="paired circular vs graph convolution training")
    return p


def _fail(err: CliError):
    print(json.dumps({"error": err.kind, "exit_code": err.code, "message": err.message}), file=sys.stderr)
    return err.code


def main(argv=None):
    logging.basicConfig(level=os.environ.get("DEEPSNAKE_LOG", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        try:
            os.makedirs(args.workdir, exist_ok=True)
            os.chdir(args.workdir)
        except OSError as e:
            raise CliError(EXIT_IO, "io", f"cannot use workdir {args.workdir}: {e.strerror}") from e
        overrides = list(args.set)
        if getattr(args, "checkpoint", None):
            overrides.append(f"{args.command}.checkpoint={args.checkpoint}")
        if getattr(args, "seeds", None):
            overrides.append(f"render.seeds={args.seeds}")
        cp = load_config(args.config, overrides)
        cfg = typed(cp)
        train_config(cfg)  # validate every section before touching files
        summary = COMMANDS[args.command](cp, cfg)
    except CliError as e:
        return _fail(e)
    except hn.CheckpointError as e:
        return _fail(CliError(EXIT_CHECKPOINT, "checkpoint", str(e)))
    except OSError as e:
        return _fail(CliError(EXIT_IO, "io", f"{e.filename or ''}: {e.strerror or e}".strip(": ")))
    print(json.dumps({"command": args.command, **summary}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
