"""Operational shell: train / eval / sample / verify.

Exit codes: 0 success, 1 usage, 2 validation failure, 3 numeric failure.
`SERE_SEED` overrides the config seed. Every run logs its fully resolved
config (with per-key provenance) next to its outputs, so any artifact is
reproducible from its directory alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import data as data_mod
from . import oracle
from .config import ConfigError, load_config
from .hierarchy import HierarchySpec, SereModel, linear_hierarchy_spec, install_linear_model
from .tensor import Tape, new_rng, Tensor
from .training import NumericError, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="sere", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_eval = sub.add_parser("eval", help="ELBO and IWAE bounds on the validation split")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--iw-samples", type=int, default=1000)

    p_sample = sub.add_parser("sample", help="draw from the generative model")
    p_sample.add_argument("--ckpt", required=True)
    p_sample.add_argument("--count", type=int, default=16)
    p_sample.add_argument("--out", required=True)

    p_verify = sub.add_parser("verify", help="run the oracle verification suites")
    p_verify.add_argument("--suite", default="all",
                          choices=["all", "factorization", "gradients", "bijectors"])
    return parser


def _build_dataset(cfg):
    d = cfg["data"]
    seed = cfg["seed"]
    if d["kind"] == "idx":
        if not d["path"]:
            raise ConfigError("data.path is required for kind 'idx'")
        x, side = data_mod.idx_pipeline(d["path"], n_keep=d["n_train"] + d["n_val"],
                                        downscale=d["downscale"])
        return x, side
    n = d["n_train"] + d["n_val"]
    synth = data_mod.synth_dataset(d["kind"], n, seed=seed, image_side=d["image_side"],
                                   components=d["components"], noise=d["noise"],
                                   dims=tuple(d["dims"]), xdim=d["xdim"])
    return synth.samples, synth.image_side


def _write_resolved(cfg, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump({"config": cfg.resolved, "provenance": cfg.provenance}, fh, indent=2)


def _metrics_header(n_layers):
    return (["epoch", "beta", "train_reg_elbo", "train_elbo", "val_elbo"]
            + [f"kl_{l}" for l in range(1, n_layers + 1)] + ["wall_time"])


def cmd_train(args):
    cfg = load_config(args.config)
    env_seed = os.environ.get("SERE_SEED")
    if env_seed is not None:
        cfg.override_seed(int(env_seed), source="env")
    x, side = _build_dataset(cfg)
    spec = cfg.spec()
    tc = cfg.train_config()
    out_dir = Path(cfg["out_dir"])
    _write_resolved(cfg, out_dir)

    model = optimizer = None
    start_epoch = 0
    if args.resume:
        ck = ckpt_mod.load_checkpoint(args.resume)
        model, optimizer = ckpt_mod.restore_model(ck)
        start_epoch = ck.epoch
        spec = model.spec

    embedded = {"run": cfg.resolved, "spec": ckpt_mod.spec_as_dict(spec)}
    every = cfg["train"]["checkpoint_every"]
    metrics_path = out_dir / "metrics.csv"
    header = _metrics_header(spec.L)
    new_file = start_epoch == 0 or not metrics_path.exists()
    fh = open(metrics_path, "w" if new_file else "a", newline="")
    writer = csv.writer(fh)
    if new_file:
        writer.writerow(header)

    def on_epoch(epoch, mdl, opt, row):
        writer.writerow([row.epoch, f"{row.beta:.10g}", f"{row.train_reg_elbo:.10g}",
                         f"{row.train_elbo:.10g}", f"{row.val_elbo:.10g}"]
                        + [f"{k:.10g}" for k in row.val_kls] + [f"{row.wall_time:.4f}"])
        fh.flush()
        if every and (epoch + 1) % every == 0:
            ckpt_mod.save_checkpoint(out_dir / "ckpt_latest.bin", mdl, opt, epoch + 1,
                                     cfg["seed"], config=embedded)

    try:
        model, metrics = train(tc, spec, x, model=model, optimizer=optimizer,
                               start_epoch=start_epoch, on_epoch=on_epoch)
    finally:
        fh.close()
    ckpt_mod.save_checkpoint(out_dir / "ckpt_final.bin", model, None, tc.epochs,
                             cfg["seed"], config=embedded)
    print(f"trained {tc.epochs - start_epoch} epochs; metrics at {metrics_path}")
    return EXIT_OK


def _restore(path):
    ck = ckpt_mod.load_checkpoint(path)
    model, optimizer = ckpt_mod.restore_model(ck)
    return ck, model


def cmd_eval(args):
    if args.iw_samples < 1:
        raise ConfigError("--iw-samples must be >= 1")
    ck, model = _restore(args.ckpt)
    run = ck.config.get("run")
    if run is None:
        raise ConfigError("checkpoint has no embedded run config")
    from .config import validate_document

    cfg = validate_document(run)
    x, _ = _build_dataset(cfg)
    from .training import dynamic_binarize, split_data

    _, val = split_data(x, cfg["train"]["val_fraction"], cfg["seed"])
    if val.shape[0] == 0:
        val = x
    if cfg["train"]["binarize"]:
        val = dynamic_binarize(val, new_rng(cfg["seed"], "eval-binarize"))
    report = model.evaluate(val, args.iw_samples, new_rng(cfg["seed"], "eval"))
    summary = {
        "n": int(val.shape[0]),
        "elbo": report.elbo,
        "recon": report.recon,
        "kl_layers": report.kl_layers,
        "iwae": report.iwae,
        "iw_samples": report.iwae_samples,
    }
    print(json.dumps(summary, sort_keys=True))
    if not np.isfinite(report.elbo) or not np.isfinite(report.iwae):
        raise NumericError("eval summary", report.elbo)
    return EXIT_OK


def write_pgm(path, image, side):
    """Binary (P5) grayscale PGM."""
    gray = np.clip(np.asarray(image, dtype=np.float64).reshape(side, side), 0.0, 1.0)
    payload = (gray * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{side} {side}\n255\n".encode())
        fh.write(payload.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3][: w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / 255.0


def cmd_sample(args):
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    ck, model = _restore(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = ck.rng_state.get("master_seed", 0)
    rng = new_rng(seed, "sample")
    _, x = model.generate(args.count, rng)
    side = int(round(np.sqrt(model.spec.data_dim)))
    if model.spec.decoder == "bernoulli" and side * side == model.spec.data_dim:
        for i in range(args.count):
            write_pgm(out / f"sample_{i:04d}.pgm", x[i], side)
        print(f"wrote {args.count} PGM images to {out}")
    else:
        path = out / "samples.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(model.spec.data_dim)])
            for row in x:
                writer.writerow([f"{v:.10g}" for v in row])
        print(f"wrote {args.count} rows to {path}")
    return EXIT_OK


# verification suites ---------------------------------------------------------

def verify_factorization_suite(n_valid=50, n_broken=20, seed=0):
    lines = []
    ok = True
    rng = new_rng(seed, "verify-factorization")
    worst_valid = 0.0
    for i in range(n_valid):
        L = 3 + (i % 2)
        model = oracle.random_sere_model(rng, L=L, dims=[int(rng.integers(1, 4)) for _ in range(L)])
        joint = oracle.build_joint(model)
        if not joint.check_psd():
            ok = False
            lines.append(f"FAIL joint covariance not PSD for valid model {i}")
        worst_valid = max(worst_valid, oracle.verify_factorization(model))
    lines.append(f"max factorization residual over {n_valid} valid models: {worst_valid:.3e}")
    if worst_valid > 1e-8:
        ok = False
        lines.append("FAIL valid-model residual exceeds 1e-8")
    kinds = ["skip-decoder", "dlgm", "condition-on-eps"]
    worst_broken = np.inf
    for i in range(n_broken):
        model, cond = oracle.random_broken_model(rng, kinds[i % 3])
        worst_broken = min(worst_broken, oracle.verify_factorization(model, condition_on=cond))
    lines.append(f"min broken-wiring residual over {n_broken} counterexamples: {worst_broken:.3e}")
    if worst_broken <= 1e-3:
        ok = False
        lines.append("FAIL broken-wiring residual not above 1e-3")
    return ok, lines


def verify_gradients_suite(seed=0):
    lines = []
    ok = True
    rng = new_rng(seed, "verify-gradients")

    w = Tensor(rng.standard_normal(6), requires_grad=True)
    res = oracle.grad_check(lambda: (w * w).sum(), [w])
    lines.append(f"quadratic gradient check: max rel err {res.max_rel_err:.3e}")
    if res.max_rel_err > 1e-9:
        ok = False
        lines.append("FAIL quadratic gradient check above 1e-9")

    spec = HierarchySpec(
        data_dim=4, layer_dims=(3, 3), decoder="bernoulli", activation="tanh",
        evidence_widths=(6,), evidence_feature=5, latent_widths=(4,), latent_feature=4,
        head_widths=(), prior_widths=(), bijector_widths=(4,), decoder_widths=(8,),
        batchnorm=False)
    model = SereModel(spec, seed=7)
    x = (new_rng(seed, "gradcheck-x").random((4, 4)) < 0.5).astype(float)
    noises = [new_rng(seed, "gradcheck-noise", l).standard_normal((4, d))
              for l, d in enumerate(spec.layer_dims)]
    params = [model.store[n] for n in model.store.names()]

    def elbo_fn():
        return model.elbo(x, beta=1.0, noises=noises).elbo

    res = oracle.grad_check(elbo_fn, params)
    lines.append(f"ELBO gradient check over {res.n_checked} coords: "
                 f"max rel err {res.max_rel_err:.3e} ({len(res.skipped)} kinks skipped)")
    if res.max_rel_err > 1e-4:
        ok = False
        lines.append("FAIL ELBO gradient check above 1e-4")
    return ok, lines


def verify_bijectors_suite(n_instances=1000, seed=0):
    from .bijectors import AffineDiagRank1

    lines = []
    ok = True
    rng = new_rng(seed, "verify-bijectors")
    worst_rt = 0.0
    worst_ld = 0.0
    for _ in range(n_instances):
        dim = int(rng.integers(1, 7))
        bij = AffineDiagRank1(
            shift=Tensor(rng.uniform(-2, 2, dim)),
            raw_diag=Tensor(rng.uniform(-2, 2, dim)),
            perturb=Tensor(rng.uniform(-1, 1, dim)),
        )
        eps = Tensor(rng.uniform(-2, 2, (3, dim)))
        z, ld = bij.forward(eps)
        back, ld_inv = bij.inverse(z)
        worst_rt = max(worst_rt, float(np.max(np.abs(back.data - eps.data))))
        dense = np.diag(bij.diag.data) + np.outer(bij.perturb.data, bij.perturb.data)
        _, dense_ld = np.linalg.slogdet(dense)
        worst_ld = max(worst_ld, abs(float(ld.data) - dense_ld) / max(abs(dense_ld), 1e-12))
        if abs(float(ld.data) + float(ld_inv.data)) > 1e-10:
            ok = False
            lines.append("FAIL forward/inverse log-dets do not cancel")
    lines.append(f"bijector round-trip worst error over {n_instances} instances: {worst_rt:.3e}")
    lines.append(f"log-det vs dense-Jacobian worst rel err: {worst_ld:.3e}")
    if worst_rt > 1e-9:
        ok = False
        lines.append("FAIL bijector round trip above 1e-9")
    if worst_ld > 1e-8:
        ok = False
        lines.append("FAIL bijector log-det above 1e-8")
    return ok, lines


def cmd_verify(args):
    suites = {
        "factorization": verify_factorization_suite,
        "gradients": verify_gradients_suite,
        "bijectors": verify_bijectors_suite,
    }
    names = list(suites) if args.suite == "all" else [args.suite]
    all_ok = True
    for name in names:
        ok, lines = suites[name]()
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] suite {name}")
        for line in lines:
            print(f"  {line}")
        all_ok = all_ok and ok
    return EXIT_OK if all_ok else EXIT_NUMERIC


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    commands = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample,
                "verify": cmd_verify}
    try:
        return commands[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
