"""Command-line entry point: ``pagoda <command> [--config PATH] [--seed N] [--out DIR] [k=v ...]``.

Exit codes: 0 ok, 2 usage/config error, 3 missing or unreadable prerequisite,
4 numeric failure. Every command writes ``summary_<command>.json`` to the
output directory (validated against the bundled schema) and prints it.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
import zlib
from dataclasses import fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import nd
from .cfg import EstimatorConfig, OmegaPrior, guided_ddim_sampler, train_omega_estimator
from .control import EditRequest, LinearOperator, invert_edit, latent_dim, latent_optimize, observe, slerp
from .data import get_dataset
from .diffusion import (
    DSMConfig,
    ForwardProcess,
    ScoreNet,
    TimeGrid,
    load_score,
    prior_sample,
    prior_std,
    save_score,
    train_dsm,
)
from .distill import Stage2Config, ema_generator, load_generator, save_generator, train_stage2
from .grow import GrowableGenerator, Lattice, Stage3Config, consistency, grow, load_grown, save_grown, train_stage3
from .metrics import mode_recall, sliced_w, w1
from .pairs import DownsampleOp, PairFileError, PairSet, downsample, load_pairs, save_pairs, upsample_nearest

COMMANDS = ["dsm-train", "build-pairs", "distill", "grow", "sample", "edit", "interpolate", "cfg-train", "lab", "eval"]
LOW_N = 100
REF_N = 100_000  # reference draws for eval; keeps its own sampling error small

DEFAULTS = {
    "name": "run",
    "seed": 0,
    "out": None,
    "dataset": {"name": "bimodal1d", "kwargs": {}},
    "process": {"kind": "VE", "T": 10.0, "steps": 40},
    "teacher": {
        "hidden": [64, 64], "activation": "silu", "sigma_data": 2.0, "emb_dim": 8, "conditional": None,
        "downsample": None, "steps": 20000, "batch": 256, "lr": 2e-3, "lr_decay": True, "ema_decay": 0.999,
        "cond_drop": 0.1, "log_every": 100,
    },
    "pairs": {"n": 4000, "n_heldout": 1000, "fraction": 1.0, "omega": None},
    "stage2": {"hidden": [64, 64], "steps": 8000, "lr_g": 3e-3, "lr_d": 1e-3, "lr_decay": True},
    "stage3": {"factor": None, "channels": 8, "steps": 3000, "lr_g": 3e-3, "lr_decay": True, "consistency_every": 500, "probe_n": 100},
    "sample": {"n": 1000, "ckpt": None},
    "edit": {"mode": "inpaint", "operator": {"kind": "mask", "indices": None, "factor": 2}, "steps": 500, "lr": 1e-2,
             "optimizer": "adam", "init": "prior", "noise_std": 0.0, "c": None, "c_new": None},
    "interpolate": {"n": 11},
    "cfg": {"prior": "uniform:2,10", "hidden": [64, 64], "mode": "mean", "steps": 2000, "batch": 256, "lr": 1e-3, "lr_decay": True, "log_every": 100},
    "eval": {"metric": "w1", "n": 10000, "ckpt": None},
}


class UsageError(Exception):
    code = 2


class MissingPrerequisite(Exception):
    code = 3


# -- configuration ----------------------------------------------------------------------
def _schema(name):
    return json.loads(resources.files("pagoda").joinpath("schemas", name).read_text())


def _merge(base, upd):
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(s):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def apply_overrides(cfg, items):
    for item in items:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, val = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(path=None, overrides=(), seed=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    try:
        jsonschema.validate(cfg, _schema("config.schema.json"))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise UsageError(f"config error at {where}: {e.message}") from None
    return cfg


def _dc(cls, section, drop=()):
    """Build a dataclass from a config section, rejecting unknown keys."""
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section.items() if k not in drop}
    unknown = sorted(set(kw) - names)
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {unknown}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {cls.__name__}: {e}") from None


# -- shared helpers ----------------------------------------------------------------------
class Run:
    def __init__(self, command, cfg, out):
        self.command, self.cfg, self.out = command, cfg, Path(out)
        self.seed = int(cfg["seed"])
        self.rng = np.random.default_rng([self.seed, zlib.crc32(command.encode())])
        self.artifacts, self.warnings, self.metrics = [], [], {}
        try:
            self.ds = get_dataset(cfg["dataset"]["name"], **cfg["dataset"].get("kwargs", {}))
        except KeyError as e:
            raise UsageError(str(e.args[0])) from None
        except TypeError as e:
            raise UsageError(f"bad dataset kwargs: {e}") from None
        p = cfg["process"]
        self.process = ForwardProcess(p["kind"], float(p["T"]))
        self.grid = TimeGrid.for_process(self.process, int(p["steps"]))

    def path(self, name):
        return self.out / name

    def need(self, name, hint):
        path = self.path(name)
        if not path.exists():
            raise MissingPrerequisite(f"missing prerequisite {path}; run `pagoda {hint}` first")
        return path

    def add(self, name):
        self.artifacts.append(name)

    @property
    def op(self):
        spec = self.cfg["teacher"].get("downsample")
        if not spec:
            return None
        spec = dict(spec)
        if self.ds.shape is not None:
            spec.setdefault("layout", "grid")
            spec.setdefault("shape", self.ds.shape)
        try:
            return DownsampleOp(spec.get("kind", "avgpool"), int(spec.get("factor", 2)), spec.get("layout", "vector"), spec.get("shape"))
        except ValueError as e:
            raise UsageError(f"teacher.downsample: {e}") from None

    def draw(self, n, rng, low=True):
        """(x, c) with x optionally at the teacher's resolution; c is None for unlabelled data."""
        out = self.ds.sample(n, rng)
        x, c = out if isinstance(out, tuple) else (out, None)
        if low and self.op is not None:
            x = downsample(self.op, x)
        return x, c

    def teacher(self):
        path = self.need("teacher.pgda", "dsm-train")
        try:
            return load_score(path)
        except nd.CheckpointError as e:
            raise MissingPrerequisite(f"{path}: {e}") from None

    def pairs(self, name="pairs.pgpr"):
        path = self.need(name, "build-pairs")
        try:
            return load_pairs(path)
        except (PairFileError, nd.CheckpointError) as e:
            raise MissingPrerequisite(f"{path}: {e}") from None

    def generator(self, path=None):
        path = Path(path) if path else None
        if path is None:
            path = self.need("generator.pgda", "distill")
        elif not path.exists():
            raise MissingPrerequisite(f"missing prerequisite {path}")
        try:
            _, meta = nd.checkpoint.read(path)
            if meta.get("kind") == "grown":
                return load_grown(path)[0]
            return load_generator(path)[0]
        except nd.CheckpointError as e:
            raise MissingPrerequisite(f"{path}: {e}") from None


def write_tensors(path, meta=None, **arrays):
    nd.checkpoint.atomic_write(path, nd.checkpoint.encode(arrays, meta))


def read_tensors(path):
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"missing input tensor file {path}")
    try:
        return nd.checkpoint.read(path)
    except nd.CheckpointError as e:
        raise MissingPrerequisite(f"{path}: {e}") from None


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    nd.checkpoint.atomic_write(path, buf.getvalue().encode())


# -- commands -------------------------------------------------------------------------------
def cmd_dsm_train(run: Run, args):
    t = run.cfg["teacher"]
    n_classes = run.ds.n_classes if t.get("conditional") in (None, True) else 0
    if t.get("conditional") and not run.ds.n_classes:
        raise UsageError(f"dataset {run.ds.name} has no labels for a conditional teacher")
    x0, _ = run.draw(2, np.random.default_rng(0))
    net = ScoreNet(x0.shape[1], tuple(t["hidden"]), t["activation"], n_classes, t["emb_dim"], t["sigma_data"], rng=run.rng)
    keys = ("steps", "batch", "lr", "lr_decay", "ema_decay", "cond_drop", "log_every")
    dcfg = _dc(DSMConfig, {k: t[k] for k in keys if k in t})

    def sample_fn(n, rng):
        x, c = run.draw(n, rng)
        return (x, c) if n_classes else x

    model = train_dsm(sample_fn, run.process, net, dcfg, run.rng)
    if dcfg.ema_decay > 0:
        nd.swap_in_ema(net.params)
    save_score(run.path("teacher.pgda"), model, run.grid)
    run.add("teacher.pgda")
    run.add("teacher.pgda.json")
    hist = np.asarray(model.loss_history)
    k = max(1, dcfg.log_every)
    rows = [("dsm", s, float(hist[max(0, s - k) : s].mean())) for s in range(k, len(hist) + 1, k)]
    write_csv(run.path("dsm_metrics.csv"), ["stage", "step", "loss"], rows)
    run.add("dsm_metrics.csv")
    run.metrics.update(final_loss=float(hist[-k:].mean()) if len(hist) else None, d=int(x0.shape[1]), n_classes=n_classes)


def cmd_build_pairs(run: Run, args):
    teacher = run.teacher()
    pc = run.cfg["pairs"]
    omega = pc.get("omega")
    prior = _omega_prior(args, None)
    if (omega is not None or prior is not None) and not teacher.conditional:
        raise UsageError("guided pairs need a class-conditional teacher")
    for name, n in (("pairs.pgpr", int(pc["n"])), ("pairs_heldout.pgpr", int(pc.get("n_heldout", 0)))):
        if n <= 0:
            continue
        out = run.ds.sample(n, run.rng)
        x, c = out if isinstance(out, tuple) else (out, None)
        c = c if teacher.conditional else None
        w = prior.sample(n, run.rng) if prior is not None else omega
        ps = build_pairs_checked(x, teacher, run, c, pc.get("fraction", 1.0) if name == "pairs.pgpr" else 1.0, w)
        save_pairs(ps, run.path(name))
        run.add(name)
        run.metrics[f"n_{name.split('.')[0]}"] = len(ps)


def build_pairs_checked(x, teacher, run, c, fraction, omega):
    from .pairs import build_pairs

    try:
        return build_pairs(x, teacher, run.op, run.grid, run.rng, c, fraction, omega, seed=run.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_distill(run: Run, args):
    teacher = run.teacher()
    pairs = run.pairs()
    s2 = dict(run.cfg["stage2"])
    hidden = tuple(s2.pop("hidden", (64, 64)))
    config = _dc(Stage2Config, s2)
    G, D, log = train_stage2(teacher, pairs, lambda n, r: run.draw(n, r)[0], config, run.rng, hidden=hidden)
    if config.ema_decay > 0:
        G = ema_generator(G)
    save_generator(run.path("generator.pgda"), G, meta={"process": {"kind": run.process.kind, "T": run.process.T}})
    log.write(run.path("stage2_metrics.csv"))
    run.add("generator.pgda")
    run.add("stage2_metrics.csv")
    last = log.rows[-1]
    run.metrics.update(loss_rec=last["loss_rec"], loss_adv=last["loss_adv"], **{"lambda": last["lambda"]})
    held = run.path("pairs_heldout.pgpr")
    if held.exists():
        h = run.pairs("pairs_heldout.pgpr")
        run.metrics["heldout_rec_mse"] = float(np.mean(np.sum((G.sample(h.z) - h.x_low) ** 2, axis=1)))


def cmd_grow(run: Run, args):
    base = run.generator(run.need("generator.pgda", "distill"))
    if isinstance(base, GrowableGenerator):
        raise UsageError("generator.pgda already holds a grown generator")
    pairs = run.pairs()
    s3 = dict(run.cfg["stage3"])
    factor = s3.pop("factor", None)
    channels = int(s3.pop("channels", 8))
    probe_n = int(s3.pop("probe_n", 100))
    op = DownsampleOp.from_dict(pairs.header["op"]) if pairs.header.get("op") else None
    shape = op.out_shape() if op is not None and op.layout == "grid" else None
    if op is None:
        # no higher resolution exists: the Stage-3 target is nearest replication of the data
        factor = int(factor or 2)
        op = DownsampleOp("avgpool", factor, "vector")
        run.warnings.append("data has no higher resolution; Stage 3 targets nearest-neighbour replication")
        x_high = upsample_nearest(op, pairs.x_low)
        pairs = PairSet(x_high, pairs.x_low, pairs.z, pairs.c, pairs.omega, pairs.header)

        def data_high(n, rng):
            return upsample_nearest(op, run.draw(n, rng)[0])
    else:
        if factor is not None and int(factor) != op.factor:
            raise UsageError(f"stage3.factor {factor} differs from the pair downsample factor {op.factor}")
        factor = op.factor

        def data_high(n, rng):
            return run.draw(n, rng, low=False)[0]

    lattice = Lattice(shape[:2], shape[2]) if shape else Lattice((pairs.d_low,))
    G = grow(GrowableGenerator(base, lattice, channels=channels, rng=run.rng), factor, run.rng)
    z = prior_sample(run.process, base.d, probe_n, run.rng)
    corr0, gap0 = consistency(G, base, z, factor)
    config = _dc(Stage3Config, s3)
    G, _, log = train_stage3(G, pairs, data_high, config, run.rng, lambda n, r: prior_sample(run.process, base.d, n, r), base=base)
    corr, gap = consistency(G, base, z, factor)
    save_grown(run.path("grown.pgda"), G)
    log.write(run.path("stage3_metrics.csv"))
    run.add("grown.pgda")
    run.add("stage3_metrics.csv")
    run.metrics.update(factor=factor, d_out=G.d, init_consistency_gap=gap0, init_correlation=corr0, consistency=corr, consistency_gap=gap)


def cmd_sample(run: Run, args):
    G = run.generator(args.ckpt or run.cfg["sample"].get("ckpt"))
    n = int(args.n if args.n is not None else run.cfg["sample"]["n"])
    if n < 0:
        raise UsageError("--n must be nonnegative")
    d_in = latent_dim(G)
    z = prior_sample(run.process, d_in, n, run.rng) if n else np.zeros((0, d_in))
    x = G.sample(z) if n else np.zeros((0, G.d))
    write_tensors(run.path("samples.pgda"), {"kind": "samples", "n": n}, x=x, z=z)
    run.add("samples.pgda")
    run.metrics.update(n=n, d=int(x.shape[1]))


def _operator(spec, d):
    kind = spec.get("kind", "mask")
    try:
        if kind == "mask":
            idx = spec.get("indices")
            idx = list(range(0, d, 2)) if idx is None else idx
            return LinearOperator("mask", d, indices=idx)
        if kind == "downsample":
            return LinearOperator("downsample", d, op=DownsampleOp("avgpool", int(spec.get("factor", 2))))
        return LinearOperator(kind, d)
    except ValueError as e:
        raise UsageError(f"edit.operator: {e}") from None


def cmd_edit(run: Run, args):
    if not args.input:
        raise UsageError("edit needs --input <tensor file>")
    tensors, _ = read_tensors(args.input)
    e = run.cfg["edit"]
    G = run.generator(args.ckpt)
    mode = e.get("mode", "inpaint")
    y_in = tensors.get("y", tensors.get("x"))
    if y_in is None:
        raise UsageError("input tensor file needs an 'x' or 'y' entry")
    y_in = np.atleast_2d(y_in)
    if mode == "inpaint":
        A = _operator(e.get("operator", {}), G.d)
        if y_in.shape[1] == A.d_in:
            y = observe(A, y_in, float(e.get("noise_std", 0.0)), run.rng)
        elif y_in.shape[1] == A.d_out:
            y = y_in
        else:
            raise UsageError(f"input width {y_in.shape[1]} fits neither the operator input ({A.d_in}) nor output ({A.d_out})")
        teacher = run.teacher() if e.get("init") == "inversion" else None
        try:
            req = EditRequest(y, A, None, int(e["steps"]), float(e["lr"]), e.get("optimizer", "adam"), e.get("init", "prior"))
        except ValueError as err:
            raise UsageError(str(err)) from None
        try:
            res = latent_optimize(G, req, run.rng, prior_std(run.process), teacher, run.grid)
        except ValueError as err:
            raise UsageError(str(err)) from None
        write_tensors(run.path("edited.pgda"), {"kind": "edit", "mode": mode}, x=res["x"], z=res["z"])
        write_csv(run.path("edit_trace.csv"), ["step", "residual", "best"], res["trace"])
        run.add("edit_trace.csv")
        run.metrics["residual"] = res["residual"]
    elif mode in ("superres", "class_transfer"):
        teacher = run.teacher()
        c, c_new = e.get("c"), e.get("c_new")
        c = None if c is None else np.broadcast_to(np.asarray(c), (len(y_in),))
        c_new = None if c_new is None else np.broadcast_to(np.asarray(c_new), (len(y_in),))
        try:
            x = invert_edit(G, teacher, y_in, run.grid, mode, c, c_new, run.op)
        except ValueError as err:
            raise UsageError(str(err)) from None
        write_tensors(run.path("edited.pgda"), {"kind": "edit", "mode": mode}, x=x)
    else:
        raise UsageError(f"unknown edit mode {mode!r}")
    run.add("edited.pgda")


def cmd_interpolate(run: Run, args):
    G = run.generator(args.ckpt)
    d_in = latent_dim(G)
    if args.input:
        tensors, _ = read_tensors(args.input)
        z = np.atleast_2d(tensors.get("z", np.zeros((0, d_in))))
        if z.shape != (2, d_in):
            raise UsageError(f"interpolation endpoints must be a (2, {d_in}) 'z' tensor")
    else:
        z = prior_sample(run.process, d_in, 2, run.rng)
    n = int(run.cfg["interpolate"]["n"])
    if n < 2:
        raise UsageError("interpolate.n must be at least 2")
    t = np.linspace(0.0, 1.0, n)
    try:
        path = slerp(z[0], z[1], t)
    except ValueError as e:
        raise UsageError(str(e)) from None
    x = G.sample(path)
    write_tensors(run.path("interp.pgda"), {"kind": "interpolation"}, t=t, z=path, x=x)
    rows = [(ti, float(np.linalg.norm(zi)), *xi) for ti, zi, xi in zip(t, path, x)]
    write_csv(run.path("interp.csv"), ["t", "z_norm"] + [f"x{i}" for i in range(x.shape[1])], rows)
    run.add("interp.pgda")
    run.add("interp.csv")
    norms = np.linalg.norm(path, axis=1)
    run.metrics.update(n=n, norm_spread=float(norms.max() - norms.min()))


def _omega_prior(args, default):
    spec = getattr(args, "omega_prior", None) or default
    if spec is None:
        return None
    try:
        return OmegaPrior.parse(spec)
    except ValueError as e:
        raise UsageError(f"--omega-prior: {e}") from None


def cmd_cfg_train(run: Run, args):
    teacher = run.teacher()
    if not teacher.conditional:
        raise MissingPrerequisite("cfg-train needs a class-conditional teacher (dsm-train on a labelled dataset)")
    c_cfg = dict(run.cfg["cfg"])
    prior = _omega_prior(args, c_cfg.pop("prior"))
    hidden = tuple(c_cfg.pop("hidden", (64, 64)))
    mode = c_cfg.pop("mode", "mean")
    config = _dc(EstimatorConfig, c_cfg)
    k = teacher.net.n_classes
    sampler = guided_ddim_sampler(teacher, teacher, run.grid)
    est, trace = train_omega_estimator(sampler, prior, lambda n, r: r.integers(k, size=n), config, run.rng,
                                       d=teacher.d, n_classes=k, hidden=hidden, mode=mode)
    nd.save_params(run.path("omega_estimator.pgda"), est.params, meta={"kind": "omega_estimator", "config": est.config()})
    write_csv(run.path("cfg_metrics.csv"), ["stage", "step", "loss"], [("cfg", s, l) for s, l in trace])
    run.add("omega_estimator.pgda")
    run.add("cfg_metrics.csv")
    run.metrics.update(final_loss=trace[-1][1] if trace else None, prior=prior.to_str(), prior_mean=prior.mean())


def cmd_lab(run: Run, args):
    from .theory import LABS, run_lab

    if args.lab not in (*LABS, "all"):
        raise UsageError(f"unknown lab {args.lab!r}; choose from {sorted(LABS)} or all")
    lab_dir = run.path(f"lab_{args.lab}")
    rows = run_lab(args.lab, lab_dir)
    for p in sorted(lab_dir.iterdir()):
        run.add(str(p.relative_to(run.out)))
    run.metrics.update(n_claims=len(rows), n_hold=sum(bool(r["holds"]) for r in rows), all_hold=all(bool(r["holds"]) for r in rows))


def cmd_eval(run: Run, args):
    ev = run.cfg["eval"]
    metric = args.metric or ev["metric"]
    if metric not in ("w1", "sliced_w", "mode_recall"):
        raise UsageError(f"unknown metric {metric!r}; choose w1, sliced_w or mode_recall")
    n = int(args.n if args.n is not None else ev["n"])
    if n < 1:
        raise UsageError("--n must be at least 1")
    ckpt = args.ckpt or ev.get("ckpt")
    if ckpt == "data":
        gen = run.draw(n, run.rng, low=False)[0]
    else:
        G = run.generator(ckpt)
        d_in = latent_dim(G)
        gen = G.sample(prior_sample(run.process, d_in, n, run.rng))
    ref_hi = run.draw(max(n, REF_N), run.rng, low=False)[0]
    ref = ref_hi
    if ref.shape[1] != gen.shape[1]:
        if run.op is not None and run.op.out_dim(ref.shape[1]) == gen.shape[1]:
            ref = downsample(run.op, ref)
        elif gen.shape[1] % ref.shape[1] == 0:
            # grown output on data without a higher resolution: compare with the replicated data
            ref = upsample_nearest(DownsampleOp("avgpool", gen.shape[1] // ref.shape[1]), ref)
    if ref.shape[1] != gen.shape[1]:
        raise UsageError(f"generated dim {gen.shape[1]} does not match data dim {ref.shape[1]}")
    if metric == "w1":
        if gen.shape[1] != 1:
            raise UsageError("w1 is defined for 1-D data; use sliced_w")
        value = w1(gen, ref)
    elif metric == "sliced_w":
        value = sliced_w(gen, ref)
    else:
        if run.ds.centers is None:
            raise UsageError(f"dataset {run.ds.name} has no mode centres")
        value = mode_recall(gen, run.ds.centers)
    run.metrics.update(metric=metric, value=float(value), n=n, low_n=n < LOW_N)
    if n < LOW_N:
        run.warnings.append(f"low-n: {n} samples")


HANDLERS = {
    "dsm-train": cmd_dsm_train, "build-pairs": cmd_build_pairs, "distill": cmd_distill, "grow": cmd_grow,
    "sample": cmd_sample, "edit": cmd_edit, "interpolate": cmd_interpolate, "cfg-train": cmd_cfg_train,
    "lab": cmd_lab, "eval": cmd_eval,
}


# -- entry point ------------------------------------------------------------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="pagoda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides PGDA_OUT and the config)")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides, values parsed as JSON")
        if name == "lab":
            p.add_argument("lab", help="optimality | stability | bounds | all")
        if name in ("sample", "eval"):
            p.add_argument("--n", type=int)
        if name in ("sample", "edit", "interpolate", "eval"):
            p.add_argument("--ckpt", help="generator checkpoint (eval also accepts 'data')")
        if name in ("edit", "interpolate"):
            p.add_argument("--input", help="tensor file (PGDA) with 'x'/'y' or 'z'")
        if name == "eval":
            p.add_argument("--metric")
        if name in ("build-pairs", "cfg-train"):
            p.add_argument("--omega-prior", help="guidance-weight prior, e.g. uniform:2,10 or truncnorm:2,3,1,10")
    return parser


def _out_dir(args, cfg):
    if args.out:
        return Path(args.out)
    if os.environ.get("PGDA_OUT"):
        return Path(os.environ["PGDA_OUT"])
    return Path(cfg["out"] or Path("runs") / cfg["name"])


def _digest(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _finish(run_or_none, command, cfg, out, code, error):
    summary = {
        "command": command,
        "ok": code == 0,
        "exit_code": code,
        "metrics": run_or_none.metrics if run_or_none else {},
        "artifacts": sorted(run_or_none.artifacts) if run_or_none else [],
        "warnings": run_or_none.warnings if run_or_none else [],
        "error": error,
        "seed": int(cfg["seed"]),
        "config_digest": _digest(cfg),
    }
    jsonschema.validate(summary, _schema("summary.schema.json"))
    text = json.dumps(summary, indent=1, sort_keys=True)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        nd.checkpoint.atomic_write(out / f"summary_{command}.json", (text + "\n").encode())
    print(text)
    return code


def main(argv=None):
    parser = build_parser()
    # overrides may sit anywhere on the line, so collect them from the leftovers
    args, rest = parser.parse_known_args(argv)  # argparse exits with status 2 on usage errors
    bad = [r for r in rest if r.startswith("-") or "=" not in r]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = list(args.overrides) + rest
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except UsageError as e:
        print(f"pagoda {args.command}: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    out = _out_dir(args, cfg)
    run = None
    try:
        run = Run(args.command, cfg, out)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](run, args)
        return _finish(run, args.command, cfg, out, 0, None)
    except UsageError as e:
        print(f"pagoda {args.command}: {e}", file=sys.stderr)
        return _finish(run, args.command, cfg, out, 2, str(e))
    except MissingPrerequisite as e:
        print(f"pagoda {args.command}: {e}", file=sys.stderr)
        return _finish(run, args.command, cfg, out, 3, str(e))
    except FloatingPointError as e:
        print(f"pagoda {args.command}: numeric failure: {e}", file=sys.stderr)
        return _finish(run, args.command, cfg, out, 4, f"numeric failure: {e}")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
