"""Command-line surface: one subcommand per pipeline stage.

    synth      sample a named synthetic multi-encoder scenario to FVEC files
    fork       fit normalization stats on a train split and emit normed files
    train      train a score network on one (encoder, fork) feature file
    loglik     PF-ODE log-likelihoods for a feature file under a model
    calibrate  build the two-level min-gate calibration from ID-val loglik files
    detect     score test loglik files against a calibration, emit CSV
    diagnose   eta2 / dmu / rho diagnostics
    eval       AUROC and FPR@95 from ID and OOD score files

Every command resolves its settings from an optional key=value config file
(unknown keys are hard errors) overridden by command-line flags, and writes a
JSON sidecar with the effective-config hash and input-file hashes next to
each output. All randomness flows from explicit seeds.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace as dc_replace

import numpy as np

from . import calibration as cal
from . import diagnostics as diag
from . import features as feat
from . import likelihood as ll
from . import metrics as met
from . import scorenet as net
from . import train as tr
from .errors import ValidationError
from .sde import VpSchedule

# Recognized config keys and their types; unknown keys are hard errors.
CONFIG_KEYS = {
    "alpha": float,
    "jobs": int,
    "synth.scenario": str,
    "synth.n_per_split": int,
    "synth.seed": int,
    "train.seed": int,
    "train.lr": float,
    "train.max_epochs": int,
    "train.batch_size": int,
    "train.clip_norm": float,
    "train.patience": int,
    "train.min_delta": float,
    "net.hidden": int,
    "net.depth": int,
    "net.t_emb_dim": int,
    "sched.beta_min": float,
    "sched.beta_max": float,
    "sched.T": float,
    "sched.t_eps": float,
    "ll.probes": int,
    "ll.mode": str,
    "ll.rtol": float,
    "ll.atol": float,
    "ll.probe_seed_base": int,
}


def load_config(path) -> dict:
    """Parse a key=value config file; '#' comments and blank lines allowed."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in CONFIG_KEYS:
                raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = CONFIG_KEYS[key](raw)
            except ValueError:
                raise ValidationError(
                    f"{path}:{lineno}: bad value {raw!r} for {key}") from None
    return values


class Settings:
    """Config-file values overridden by CLI flags; tracks what was consumed."""

    def __init__(self, args):
        self.values = load_config(args.config) if args.config else {}
        self.args = args
        self.used = {}

    def get(self, key, default=None, flag=None):
        if key not in CONFIG_KEYS:
            raise ValidationError(f"unrecognized config key {key!r}")
        val = getattr(self.args, flag, None) if flag else None
        if val is None:
            val = self.values.get(key, default)
        else:
            val = CONFIG_KEYS[key](val)
        self.used[key] = val
        return val

    def sched(self) -> VpSchedule:
        return VpSchedule(
            beta_min=self.get("sched.beta_min", 0.1),
            beta_max=self.get("sched.beta_max", 20.0),
            T=self.get("sched.T", 1.0),
            t_eps=self.get("sched.t_eps", 1e-5),
        )

    def ll_config(self) -> ll.LikelihoodConfig:
        return ll.LikelihoodConfig(
            probes=self.get("ll.probes", 10),
            mode=self.get("ll.mode", "hutchinson"),
            rtol=self.get("ll.rtol", 1e-5),
            atol=self.get("ll.atol", 1e-5),
            probe_seed_base=self.get("ll.probe_seed_base", 0),
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.used, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_sidecar(out_path, command, settings: Settings, inputs, extras=None):
    doc = {
        "command": command,
        "config_hash": settings.config_hash(),
        "config": settings.used,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "wall_time_s": extras.pop("wall_time_s") if extras and
        "wall_time_s" in extras else None,
    }
    if extras:
        doc.update(extras)
    with open(f"{out_path}.sidecar.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _check_overwrite(paths, force: bool):
    clashes = [str(p) for p in paths if os.path.exists(p)]
    if clashes and not force:
        raise ValidationError(
            "refusing to overwrite existing files (use --force): "
            + ", ".join(clashes))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    st = Settings(args)
    name = st.get("synth.scenario", "tri-encoder", flag="scenario")
    n = st.get("synth.n_per_split", 1000, flag="n_per_split")
    seed = st.get("synth.seed", 0, flag="seed")
    scn = feat.get_scenario(name)
    data = feat.gen_synthetic(scn, n, seed)
    os.makedirs(args.out, exist_ok=True)

    planned = []
    for split, by_enc in data.id_splits.items():
        for enc in by_enc:
            planned.append(os.path.join(args.out, f"{enc}_{split}.fvec"))
    for shift, by_enc in data.ood.items():
        for enc in by_enc:
            planned.append(os.path.join(args.out, f"{enc}_ood_{shift}.fvec"))
    _check_overwrite(planned, args.force)

    t0 = time.time()
    it = iter(planned)
    for split, by_enc in data.id_splits.items():
        for enc, fs in by_enc.items():
            feat.write_fvec(fs, next(it))
    for shift, by_enc in data.ood.items():
        for enc, fs in by_enc.items():
            feat.write_fvec(fs, next(it))
    write_sidecar(os.path.join(args.out, "synth"), "synth", st, [],
                  {"wall_time_s": time.time() - t0, "files": sorted(planned)})
    print(f"wrote {len(planned)} feature files to {args.out}")
    return 0


def cmd_fork(args) -> int:
    st = Settings(args)
    t0 = time.time()
    if not args.stats and not args.train:
        raise ValidationError("need --train (to fit stats) or --stats (to reuse)")
    if args.stats:
        stats = feat.ForkStats.load(args.stats)
        stats_path = args.stats
    else:
        train_fs = feat.read_fvec(args.train)
        stats = feat.fit_fork_stats(train_fs)
        stats_path = args.stats_out
        stats.save(stats_path)
    os.makedirs(args.outdir, exist_ok=True)
    outs = []
    for path in args.apply:
        fs = feat.read_fvec(path)
        normed = feat.apply_fork(fs, stats)
        normed.meta = dc_replace(normed.meta, stats_file=os.path.abspath(stats_path))
        base = os.path.basename(path)
        stem = base[:-5] if base.endswith(".fvec") else base
        out = os.path.join(args.outdir, f"{stem}_normed.fvec")
        feat.write_fvec(normed, out)
        outs.append(out)
    inputs = ([args.train] if not args.stats else [args.stats]) + list(args.apply)
    write_sidecar(os.path.join(args.outdir, "fork"), "fork", st, inputs,
                  {"wall_time_s": time.time() - t0, "stats": stats_path,
                   "outputs": outs})
    print(f"stats: {stats_path}; wrote {len(outs)} normed files")
    return 0


def cmd_train(args) -> int:
    st = Settings(args)
    cfg = tr.TrainConfig(
        seed=st.get("train.seed", 0, flag="seed"),
        lr=st.get("train.lr", 2e-4),
        max_epochs=st.get("train.max_epochs", 500, flag="max_epochs"),
        batch_size=st.get("train.batch_size", 512),
        clip_norm=st.get("train.clip_norm", 1.0),
        patience=st.get("train.patience", 20),
        min_delta=st.get("train.min_delta", 1e-4),
    )
    netcfg = tr.NetConfig(
        hidden=st.get("net.hidden", None),
        depth=st.get("net.depth", 6),
        t_emb_dim=st.get("net.t_emb_dim", 128),
    )
    sched = st.sched()
    t0 = time.time()
    train_fs = feat.read_fvec(args.train)
    val_fs = feat.read_fvec(args.val)
    result = tr.train(train_fs, val_fs, cfg, sched, netcfg)
    net.save_model(result.model, args.out)
    log_path = args.log or f"{args.out}.train_log.csv"
    tr.write_history_csv(result.history, log_path)
    write_sidecar(args.out, "train", st, [args.train, args.val],
                  {"wall_time_s": time.time() - t0,
                   "best_val_loss": result.best_val_loss,
                   "best_epoch": result.best_epoch,
                   "epochs_run": len(result.history),
                   "n_params": result.model.params.n_params(),
                   "train_log": log_path})
    print(f"trained {result.model.params.n_params()} params; "
          f"best val loss {result.best_val_loss:.6g} "
          f"(epoch {result.best_epoch}); model -> {args.out}")
    return 0


def cmd_loglik(args) -> int:
    st = Settings(args)
    cfg = st.ll_config()
    jobs = st.get("jobs", 1, flag="jobs")
    t0 = time.time()
    model = net.load_model(args.model)
    fs = feat.read_fvec(args.features)
    lls, diag_info = ll.log_likelihood_batch(model, fs.data, cfg, jobs=jobs)
    ll.write_loglik_file(lls, args.out)
    write_sidecar(args.out, "loglik", st, [args.model, args.features],
                  {"wall_time_s": time.time() - t0,
                   "model_hash": sha256_file(args.model),
                   "n_samples": int(lls.size),
                   **diag_info})
    print(f"wrote {lls.size} log-likelihoods -> {args.out} "
          f"(mean {lls.mean():.4g} nats, "
          f"{diag_info['mean_solver_steps']:.1f} mean solver steps)")
    return 0


def _parse_ll_args(pairs):
    out = {}
    for item in pairs:
        if "=" not in item or ":" not in item.split("=", 1)[0]:
            raise ValidationError(
                f"--ll expects encoder:fork=path, got {item!r}")
        key, path = item.split("=", 1)
        enc, fork = key.split(":", 1)
        out[(enc, fork)] = path
    return out


def _load_lls(paths_by_key, encoders=None):
    lls = {}
    for (enc, fork), path in paths_by_key.items():
        if encoders is not None and enc not in encoders:
            continue
        lls[(enc, fork)] = ll.read_loglik_file(path)
    return lls


def cmd_calibrate(args) -> int:
    st = Settings(args)
    alpha = st.get("alpha", 0.05, flag="alpha")
    paths = _parse_ll_args(args.ll)
    subset = args.encoders.split(",") if args.encoders else None
    lls = _load_lls(paths, subset)
    if not lls:
        raise ValidationError("no log-likelihood inputs after encoder filtering")
    t0 = time.time()
    bundle = cal.calibrate(lls, alpha)
    cal.save_bundle(bundle, args.out)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(cal.bundle_to_json(bundle))
            fh.write("\n")
    write_sidecar(args.out, "calibrate", st,
                  [p for (e, f), p in paths.items()
                   if subset is None or e in subset],
                  {"wall_time_s": time.time() - t0, "tau": bundle.tau,
                   "encoders": bundle.encoders})
    print(f"calibrated {len(bundle.encoders)} encoders at alpha={alpha}: "
          f"tau={bundle.tau:.6g} -> {args.out}")
    return 0


def cmd_detect(args) -> int:
    st = Settings(args)
    t0 = time.time()
    bundle = cal.load_bundle(args.cal)
    if args.alpha is not None:
        bundle = cal.adjust_threshold(bundle, float(args.alpha))
    paths = _parse_ll_args(args.ll)
    lls = _load_lls(paths, set(bundle.encoders))
    report = cal.detect(bundle, lls)
    cal.write_detect_csv(report, args.out)
    write_sidecar(args.out, "detect", st,
                  [args.cal] + [p for (e, f), p in paths.items()
                                if e in set(bundle.encoders)],
                  {"wall_time_s": time.time() - t0, "tau": report.tau,
                   "flagged": int(report.is_ood.sum()),
                   "n": int(report.s.size)})
    print(f"flagged {int(report.is_ood.sum())}/{report.s.size} samples "
          f"at tau={report.tau:.6g} -> {args.out}")
    return 0


def _read_scores(path):
    if str(path).endswith(".csv"):
        rows = np.genfromtxt(path, delimiter=",", names=True)
        return np.atleast_1d(rows["s"]).astype(np.float64)
    return ll.read_loglik_file(path)


def cmd_eval(args) -> int:
    st = Settings(args)
    t0 = time.time()
    pair = met.ScoredPair(id_scores=_read_scores(args.id),
                          ood_scores=_read_scores(args.ood))
    a = met.auroc(pair)
    f = met.fpr_at_tpr(pair, args.tpr)
    print(met.format_pair(a, f))
    if args.csv:
        exists = os.path.exists(args.csv)
        with open(args.csv, "a") as fh:
            if not exists:
                fh.write("benchmark,auroc,fpr95\n")
            fh.write(f"{args.benchmark},{a:.6f},{f:.6f}\n")
        write_sidecar(args.csv, "eval", st, [args.id, args.ood],
                      {"wall_time_s": time.time() - t0, "auroc": a,
                       "fpr": f, "benchmark": args.benchmark})
    return 0


def cmd_diagnose(args) -> int:
    st = Settings(args)
    if args.diag_cmd == "eta2":
        lls = ll.read_loglik_file(args.lls)
        fs = feat.read_fvec(args.features)
        if fs.labels is None:
            raise ValidationError(f"{args.features} carries no labels")
        value = diag.eta_squared(lls, fs.labels)
        print(f"eta2 {value:.6f}")
        payload = {"eta2": value, "n": int(lls.size)}
    elif args.diag_cmd == "dmu":
        clean = ll.read_loglik_file(args.clean)
        corrupt = ll.read_loglik_file(args.corrupt)
        value = diag.delta_mu(clean, corrupt)
        print(f"delta_mu {value:.6f}")
        payload = {"delta_mu": value,
                   "mean_clean": float(np.mean(clean)),
                   "mean_corrupt": float(np.mean(corrupt))}
    elif args.diag_cmd == "rho":
        named = []
        for item in args.ll:
            if "=" not in item:
                raise ValidationError(f"--ll expects name=path, got {item!r}")
            name, path = item.split("=", 1)
            named.append((name, ll.read_loglik_file(path)))
        if len(named) < 2:
            raise ValidationError("need at least two --ll inputs")
        rho = diag.rho_matrix([v for _, v in named])
        models = [diag.ModelDiagnostics(encoder=n, fork="-") for n, _ in named]
        profile = diag.DiagnosticProfile(models=models, rho=rho)
        screen = diag.screen_encoders(profile, args.threshold)
        print(json.dumps(screen["accepted"]))
        payload = {"screening": screen}
        if args.out_csv:
            names = [n for n, _ in named]
            with open(args.out_csv, "w") as fh:
                fh.write("," + ",".join(names) + "\n")
                for i, n in enumerate(names):
                    fh.write(n + "," + ",".join(f"{v:.6f}" for v in rho[i]) + "\n")
        if args.out_json:
            with open(args.out_json, "w") as fh:
                fh.write(profile.to_json())
                fh.write("\n")
    else:  # pragma: no cover - argparse enforces choices
        raise ValidationError(f"unknown diagnose subcommand {args.diag_cmd!r}")
    if getattr(args, "out", None):
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="encmin2l", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")

    sp = sub.add_parser("synth", help="generate a synthetic scenario")
    common(sp)
    sp.add_argument("--scenario", default=None)
    sp.add_argument("--n-per-split", dest="n_per_split", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fork", help="fit stats and emit normed-fork files")
    common(sp)
    sp.add_argument("--train", help="train-split FVEC used to fit stats")
    sp.add_argument("--stats", help="reuse an existing stats JSON")
    sp.add_argument("--stats-out", default="fork_stats.json")
    sp.add_argument("--apply", nargs="+", required=True)
    sp.add_argument("--outdir", required=True)
    sp.set_defaults(func=cmd_fork)

    sp = sub.add_parser("train", help="train a score network")
    common(sp)
    sp.add_argument("--train", required=True)
    sp.add_argument("--val", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("loglik", help="PF-ODE log-likelihoods")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=None)
    sp.set_defaults(func=cmd_loglik)

    sp = sub.add_parser("calibrate", help="build the min-gate calibration")
    common(sp)
    sp.add_argument("--ll", action="append", required=True,
                    metavar="ENC:FORK=PATH")
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--encoders", default=None,
                    help="comma-separated encoder subset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--json", default=None)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("detect", help="score test samples against a calibration")
    common(sp)
    sp.add_argument("--cal", required=True)
    sp.add_argument("--ll", action="append", required=True,
                    metavar="ENC:FORK=PATH")
    sp.add_argument("--alpha", type=float, default=None,
                    help="adjust tau to this alpha before detecting")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("diagnose", help="ID-only diagnostics")
    dsub = sp.add_subparsers(dest="diag_cmd", required=True)
    d = dsub.add_parser("eta2")
    common(d)
    d.add_argument("--lls", required=True)
    d.add_argument("--features", required=True)
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_diagnose)
    d = dsub.add_parser("dmu")
    common(d)
    d.add_argument("--clean", required=True)
    d.add_argument("--corrupt", required=True)
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_diagnose)
    d = dsub.add_parser("rho")
    common(d)
    d.add_argument("--ll", action="append", required=True, metavar="NAME=PATH")
    d.add_argument("--threshold", type=float, default=0.5)
    d.add_argument("--out-csv", dest="out_csv", default=None)
    d.add_argument("--out-json", dest="out_json", default=None)
    d.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("eval", help="AUROC and FPR@95 from score files")
    common(sp)
    sp.add_argument("--id", required=True)
    sp.add_argument("--ood", required=True)
    sp.add_argument("--tpr", type=float, default=0.95)
    sp.add_argument("--benchmark", default="benchmark")
    sp.add_argument("--csv", default=None)
    sp.set_defaults(func=cmd_eval)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
