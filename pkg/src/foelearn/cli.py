"""``foelearn`` command-line interface.

Exit codes: 0 success, 1 check failed, 2 bad arguments or configuration,
3 solver did not converge, 4 file could not be read or written.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bilevel import TrainConfig, TrainingSample, finite_difference_check, init_filterbank, train
from .energy import Blur, DownsampleBlur, FilterBank
from .errors import FoeError, ImageIOError, NotConvergedError, ParameterError
from .formats import (
    GradcheckConfig,
    load_config,
    load_model,
    read_manifest,
    save_config,
    save_model,
    write_manifest,
)
from .imagecore import (
    add_gaussian_noise,
    load_array,
    load_image,
    psnr,
    sample_patches,
    save_image,
)
from .penalty import Penalty
from .restore import RestoreTask, motion_kernel, restore

log = logging.getLogger("foelearn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NOCONV, EXIT_IO = 0, 1, 2, 3, 4

_IMAGE_SUFFIXES = (".pgm", ".pnm", ".png")


def _out(msg):
    print(msg, flush=True)


def _save_result(path, u):
    """Float ``.npy`` keeps full precision; image formats are rounded to 8 bits."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        try:
            np.save(path, u)
        except OSError as exc:
            raise ImageIOError(f"cannot write {path}: {exc}") from exc
    else:
        save_image(path, u)


class _JsonLog:
    """Append-only JSON-lines writer (no-op without a path)."""

    def __init__(self, path):
        self.fh = None
        if path:
            try:
                self.fh = open(path, "w")
            except OSError as exc:
                raise ImageIOError(f"cannot write {path}: {exc}") from exc

    def write(self, rec):
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def cmd_prepare(args):
    src = Path(args.images)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES) \
        if src.is_dir() else []
    if not files:
        raise ImageIOError(f"no .pgm/.png images in {src}")
    images = [load_image(p, convert=args.convert) for p in files]
    patches = sample_patches(images, args.patch, args.count, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, clean in enumerate(patches):
        # the stored clean patch is 8-bit, so noise goes on the quantized copy
        clean = np.clip(np.rint(clean), 0, 255)
        # per-patch stream so one record can be regenerated on its own
        noisy = add_gaussian_noise(clean, args.sigma, [args.seed, i])
        cname, nname = f"clean_{i:04d}.pgm", f"noisy_{i:04d}.npy"
        save_image(out / cname, clean)
        np.save(out / nname, noisy)
        records.append({"clean": cname, "noisy": nname, "sigma": args.sigma,
                        "seed": args.seed, "index": i,
                        "source": files[i % len(files)].name})
    write_manifest(out / "manifest.jsonl", records)
    _out(f"seed {args.seed}: wrote {len(records)} pairs to {out / 'manifest.jsonl'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _samples(manifest):
    return [TrainingSample(load_array(r["noisy"]), load_array(r["clean"]))
            for r in read_manifest(manifest)]


def cmd_train(args):
    cfg = load_config(args.config, "train") if args.config else TrainConfig()
    if args.jobs is not None:
        cfg.jobs = args.jobs
    samples = _samples(args.data)
    init = None
    if args.init_model:
        prev = load_model(args.init_model)
        init = prev.filters
        if prev.penalty != Penalty(cfg.penalty, cfg.epsilon):
            raise ParameterError("--init-model penalty differs from the configured penalty")
    _out(f"seed {cfg.seed}, config {cfg.digest()}, {len(samples)} samples")
    log_path = args.log or str(args.out) + ".log.jsonl"
    jlog = _JsonLog(log_path)

    def on_record(rec):
        jlog.write(rec)
        if not args.quiet:
            _out(f"iter {rec['iteration']:4d}  loss {rec['loss']:.6f}  "
                 f"|grad| {rec['grad_norm']:.3e}  |beta| {rec['beta_norm']:.4f}")

    try:
        res = train(samples, cfg, init=init, on_record=on_record)
    finally:
        jlog.close()
    save_model(args.out, res.model)
    _out(f"{res.status} after {res.iterations} iterations: loss {res.initial_loss:.6f} -> "
         f"{res.final_loss:.6f}; model {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# degrade / restore
# ---------------------------------------------------------------------------

def _blur_kernel(args):
    if getattr(args, "kernel", None):
        return load_array(args.kernel)
    if getattr(args, "motion", None):
        return motion_kernel(args.motion, args.angle)
    return None


def _task(args, mask=None):
    kind = args.task
    if kind == "denoise":
        return RestoreTask("denoise", sigma=args.sigma, lam=args.lam)
    if kind == "inpaint":
        return RestoreTask("inpaint", mask=mask, lam=args.lam)
    if kind == "deblur":
        kern = _blur_kernel(args)
        if kern is None:
            raise ParameterError("deblur needs --kernel FILE or --motion LENGTH")
        return RestoreTask("deblur", sigma=args.sigma, kernel=kern, lam=args.lam)
    return RestoreTask("superres", sigma=args.sigma, factor=args.factor,
                       kernel=_blur_kernel(args), lam=args.lam)


def cmd_degrade(args):
    """Synthesize an observation for one of the restoration tasks."""
    g = load_array(args.input)
    rng_seed = [args.seed, 0]
    kind = args.task
    if kind == "denoise":
        f = add_gaussian_noise(g, args.sigma, rng_seed)
    elif kind == "inpaint":
        rng = np.random.default_rng(rng_seed)
        mask = (rng.random(g.shape) >= args.missing).astype(np.float64)
        f = g * mask
        save_image(args.mask_out, 255 * mask)
    elif kind == "deblur":
        kern = _blur_kernel(args)
        if kern is None:
            raise ParameterError("deblur needs --kernel FILE or --motion LENGTH")
        f = add_gaussian_noise(Blur(kern).apply(g), args.sigma, rng_seed)
    else:
        K = DownsampleBlur(args.factor, _blur_kernel(args))
        H, W = g.shape
        g = g[:H - H % args.factor, :W - W % args.factor]
        f = add_gaussian_noise(K.apply(g), args.sigma, rng_seed)
    _save_result(args.out, f)
    _out(f"seed {args.seed}: wrote {args.out}")
    return EXIT_OK


def cmd_restore(args):
    model = load_model(args.model)
    f = load_array(args.input)
    mask = None
    if args.task == "inpaint":
        mask = (load_array(args.mask) > 0).astype(np.float64)
    task = _task(args, mask)
    res = restore(model, task, f, gtol=args.gtol, maxiter=args.maxiter)
    _save_result(args.out, res.u)
    rec = {"task": task.kind, "output": str(args.out), **res.as_dict()}
    if args.ref:
        g = load_array(args.ref)
        rec["psnr"] = psnr(res.u, g)
        rec["psnr_input"] = psnr(task.operator.warm_start(f), g)
        _out(f"PSNR {rec['psnr']:.2f} dB (warm start {rec['psnr_input']:.2f} dB)")
    if args.log:
        jlog = _JsonLog(args.log)
        jlog.write(rec)
        jlog.close()
    _out(f"lambda {res.lam:.6g}, {res.diagnostics.iterations} iterations, "
         f"{'converged' if res.converged else 'NOT converged'}; wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def evaluate(model, records, sigma=None, lam=None, jobs=1, gtol=1e-3, maxiter=50000):
    """Per-image denoising PSNR rows plus their mean."""

    def one(rec):
        f, g = load_array(rec["noisy"]), load_array(rec["clean"])
        s = sigma if sigma is not None else rec["sigma"]
        res = restore(model, RestoreTask("denoise", sigma=s, lam=lam), f, gtol=gtol,
                      maxiter=maxiter)
        return {"clean": rec["clean"], "noisy": rec["noisy"], "sigma": s,
                "psnr_noisy": psnr(f, g), "psnr": psnr(res.u, g),
                "converged": res.converged}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(one, records))
    else:
        rows = [one(r) for r in records]
    mean = float(np.mean([r["psnr"] for r in rows]))
    mean_noisy = float(np.mean([r["psnr_noisy"] for r in rows]))
    return rows, {"images": len(rows), "mean_psnr": mean, "mean_psnr_noisy": mean_noisy}


def cmd_eval(args):
    if args.task != "denoise":
        raise ParameterError("eval supports --task denoise only")
    model = load_model(args.model)
    rows, summary = evaluate(model, read_manifest(args.dataset), args.sigma, args.lam,
                             args.jobs or 1)
    if args.format == "json":
        _out(json.dumps({"rows": rows, "summary": summary}, indent=1))
    else:
        _out(f"{'image':40s} {'noisy':>8s} {'restored':>8s}")
        for r in rows:
            _out(f"{Path(r['clean']).name:40s} {r['psnr_noisy']:8.2f} {r['psnr']:8.2f}")
        _out(f"{'mean (' + str(summary['images']) + ' images)':40s} "
             f"{summary['mean_psnr_noisy']:8.2f} {summary['mean_psnr']:8.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def synthetic_image(n, seed=0):
    """Deterministic test image with smooth shading, an edge and texture."""
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    img = 110 + 50 * np.sin(x / 3.0) * np.cos(y / 5.0) + 60 * (x + 0.5 * y > 0.7 * n)
    img += 15 * np.random.default_rng(seed).standard_normal((n, n))
    return np.clip(img, 0, 255)


def run_gradcheck(cfg):
    if cfg.image:
        g = load_image(cfg.image, convert=True)
        if min(g.shape) < cfg.crop:
            raise ParameterError("image smaller than crop")
        y0, x0 = (g.shape[0] - cfg.crop) // 2, (g.shape[1] - cfg.crop) // 2
        g = g[y0:y0 + cfg.crop, x0:x0 + cfg.crop]
    else:
        g = synthetic_image(cfg.crop)
    f = add_gaussian_noise(g, cfg.sigma, cfg.seed)
    fb = init_filterbank(cfg.kernel_size, cfg.n_filters, "random", norm=cfg.filter_norm,
                         seed=cfg.seed)
    alpha = np.array(cfg.alpha, dtype=np.float64) if cfg.alpha else np.ones(cfg.n_filters)
    fb = FilterBank(fb.basis, fb.beta, alpha)
    return finite_difference_check([TrainingSample(f, g)], fb, Penalty(cfg.penalty, cfg.epsilon),
                                   mode=cfg.mode, h=cfg.h, gtol=cfg.gtol, stencil=cfg.stencil)


def cmd_gradcheck(args):
    cfg = load_config(args.config, "gradcheck") if args.config else GradcheckConfig()
    _out(f"seed {cfg.seed}, penalty {cfg.penalty}, mode {cfg.mode}")
    a, n, rel = run_gradcheck(cfg)
    n_alpha = cfg.n_filters
    for k, (ak, nk, rk) in enumerate(zip(a, n, rel)):
        name = f"alpha[{k}]" if k < n_alpha else (
            f"beta[{(k - n_alpha) // (cfg.kernel_size ** 2 - 1)},"
            f"{(k - n_alpha) % (cfg.kernel_size ** 2 - 1)}]" if cfg.mode == "free"
            else f"scale[{k - n_alpha}]")
        _out(f"{name:12s} analytic {ak: .10e}  numeric {nk: .10e}  rel {rk:.2e}")
    ok = bool(np.all(rel <= cfg.threshold))
    _out(f"max relative error {rel.max():.3e}: {'PASS' if ok else 'FAIL'} at {cfg.threshold:g}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def cmd_config(args):
    if args.action == "write-defaults":
        cfg = TrainConfig() if args.kind == "train" else GradcheckConfig()
        save_config(args.out, cfg)
        _out(f"wrote {args.kind} defaults to {args.out}")
    else:
        cfg = load_config(args.file, args.kind)
        _out(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _task_parsers(sub, with_model):
    """Shared per-task flags for ``restore`` and ``degrade``."""
    parsers = {}
    for kind in ("denoise", "inpaint", "deblur", "superres"):
        p = sub.add_parser(kind)
        p.set_defaults(task=kind)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out", required=True)
        if kind != "inpaint":
            p.add_argument("--sigma", type=float, default=None if with_model else 0.0,
                           help="noise level (sets the default lambda when restoring)")
        if kind in ("deblur", "superres"):
            p.add_argument("--kernel", help="blur kernel as .npy")
            p.add_argument("--motion", type=float, help="linear motion blur length in pixels")
            p.add_argument("--angle", type=float, default=0.0)
        if kind == "superres":
            p.add_argument("--factor", type=int, default=3)
        parsers[kind] = p
    return parsers


def build_parser():
    ap = argparse.ArgumentParser(prog="foelearn", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="sample clean/noisy training patches")
    p.add_argument("--images", required=True)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--convert", action="store_true", help="convert color images to gray")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="learn a filter bank")
    p.add_argument("--data", required=True, help="manifest from 'prepare'")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--init-model", help="resume from a saved model")
    p.add_argument("--log", help="JSON-lines training log (default OUT.log.jsonl)")
    p.add_argument("--jobs", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore an image with a trained model")
    rsub = p.add_subparsers(dest="task", required=True)
    for kind, q in _task_parsers(rsub, True).items():
        q.add_argument("--model", required=True)
        q.add_argument("--lambda", dest="lam", type=float)
        q.add_argument("--ref", help="ground truth for PSNR")
        q.add_argument("--log", help="write diagnostics as JSON lines")
        q.add_argument("--gtol", type=float, default=1e-3)
        q.add_argument("--maxiter", type=int, default=50000)
        if kind == "inpaint":
            q.add_argument("--mask", required=True, help="image, nonzero = observed")
        q.set_defaults(func=cmd_restore)

    p = sub.add_parser("degrade", help="synthesize a degraded observation")
    dsub = p.add_subparsers(dest="task", required=True)
    for kind, q in _task_parsers(dsub, False).items():
        q.add_argument("--seed", type=int, default=0)
        if kind == "inpaint":
            q.add_argument("--missing", type=float, default=0.9)
            q.add_argument("--mask-out", required=True)
        q.set_defaults(func=cmd_degrade)

    p = sub.add_parser("eval", help="average denoising PSNR over a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", default="denoise")
    p.add_argument("--sigma", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradient")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("config", help="write or validate configuration files")
    csub = p.add_subparsers(dest="action", required=True)
    q = csub.add_parser("write-defaults")
    q.add_argument("--kind", choices=("train", "gradcheck"), default="train")
    q.add_argument("--out", required=True)
    q = csub.add_parser("show")
    q.add_argument("--kind", choices=("train", "gradcheck"), default="train")
    q.add_argument("file")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NotConvergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except ImageIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FoeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
