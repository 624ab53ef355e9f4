"""Command-line interface: ``qsmdiff {phantom,forward,tkd,train,invert,eval}``.

Settings may also come from ``--config FILE`` holding ``key = value`` lines
(``#`` starts a comment). Keys are the long option names with or without the
leading dashes; explicit command-line flags override the file. The resolved
configuration is printed to stderr before any work starts.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import __version__
from .denoiser import TrainHyper, build_dataset, load_model, save_model, train
from .diffusion import make_schedule
from .dipole import NoiseSpec, dipole_kernel, tkd_invert
from .exceptions import ParameterError, QSMError
from .guidance import GuidanceConfig, sample, write_trace
from .metrics import evaluate
from .network import DenoiserArch
from .phantom import make_phantom, simulate_acquisition, spec_from_mapping
from .volume import NormalizationSpec, load_volume, save_volume
from ._validation import check_triple, check_unit_vector

logger = logging.getLogger("qsmdiff")

TRAIN_PRESETS = {
    "default": dict(patch_size=48, stride=32, base_width=32, num_blocks=4, time_embed_dim=32, lr=1e-4,
                    steps=1000),
    "toy": dict(patch_size=16, stride=8, base_width=16, num_blocks=2, time_embed_dim=32, lr=1e-3, steps=2000),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ParameterError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="qsmdiff", description="Patch-diffusion susceptibility mapping toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value settings file; flags take precedence")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("phantom", help="rasterize a synthetic susceptibility phantom")
    common(p)
    p.add_argument("--shape", choices=["sphere", "cylinder", "ellipsoid_mixture"], default="sphere")
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--voxel-size", default="1,1,1")
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--chi", type=float, default=0.1)
    p.add_argument("--center", default=None)
    p.add_argument("--axis", default="0,0,1")
    p.add_argument("--half-length", type=float, default=20.0)
    p.add_argument("--n-components", type=int, default=12)
    p.add_argument("--out", required=True)

    p = sub.add_parser("forward", help="simulate a local field from a susceptibility map")
    common(p)
    p.add_argument("--chi", required=True, help="input susceptibility QVOL")
    p.add_argument("--b0", default="0,0,1")
    p.add_argument("--out-dims", default=None)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("tkd", help="thresholded k-space division")
    common(p)
    p.add_argument("--field", required=True)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the patch noise predictor")
    common(p)
    p.add_argument("--volumes", nargs="+", required=True)
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS), default="default")
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--base-width", type=int, default=None)
    p.add_argument("--num-blocks", type=int, default=None)
    p.add_argument("--time-embed-dim", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--max-patches", type=int, default=None)
    p.add_argument("--chi-scale", type=float, default=0.2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("invert", help="guided diffusion inversion of a local field")
    common(p)
    p.add_argument("--field", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--xi1", type=float, default=10.0)
    p.add_argument("--xi2", type=float, default=2.5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--tkd-threshold", type=float, default=0.1)
    p.add_argument("--patch-size", type=int, default=48)
    p.add_argument("--overlap", type=int, default=8)
    p.add_argument("--ddim-steps", type=int, default=200)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--jacobian-mode", choices=["frozen", "exact"], default="frozen")
    p.add_argument("--grad-scaling", choices=["none", "residual_norm"], default="residual_norm")
    p.add_argument("--step-rule", choices=["x0", "xt"], default="x0")
    p.add_argument("--step-budget", type=float, default=50.0)
    p.add_argument("--backprojection", choices=["interpolate", "adjoint"], default="interpolate")
    p.add_argument("--tv-epsilon", type=float, default=1e-6)
    p.add_argument("--model-voxel", default="1,1,1")
    p.add_argument("--diagnostics", default=None, help="write per-step losses here")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM/HFEN of a prediction against a reference")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask", default=None, help="QVOL whose mask (or nonzero support) to use")
    p.add_argument("--out", default=None, help="also write the JSON report here")
    return parser


# ----------------------------------------------------------- config merge


def read_config(path):
    """Parse ``key = value`` lines into a dict, keeping file order."""
    items = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        items[key.lstrip("-").replace("_", "-")] = value
    return items


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise ParameterError(f"unknown command {command!r}")


def _config_tokens(sub, items):
    """Turn config entries into argv tokens placed before the real flags, so flags win."""
    known = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                known[opt[2:]] = action
    known.pop("config", None)
    known.pop("help", None)
    tokens = []
    for key, value in items.items():
        if key not in known:
            raise ParameterError(f"unknown config key {key!r}")
        action = known[key]
        if action.nargs == "+":
            tokens += [f"--{key}", *value.split()]
        elif isinstance(action, argparse._CountAction):
            tokens += [f"--{key}"] * int(value)
        else:
            tokens += [f"--{key}", value]
    return tokens


def parse_args(argv):
    parser = build_parser()
    argv = list(argv)
    first = parser.parse_args(argv)
    if getattr(first, "config", None):
        sub = _subparser(parser, first.command)
        tokens = _config_tokens(sub, read_config(first.config))
        ns = parser.parse_args([first.command, *tokens, *argv[argv.index(first.command) + 1:]])
    else:
        ns = first
    return ns


def print_config(ns, stream=None):
    stream = stream or sys.stderr
    print(f"# qsmdiff {ns.command}: resolved configuration", file=stream)
    for key, value in sorted(vars(ns).items()):
        if key == "command":
            continue
        print(f"{key} = {value}", file=stream)


# ----------------------------------------------------------- subcommands


def cmd_phantom(ns):
    cfg = {
        "shape": ns.shape,
        "dims": ns.dims,
        "voxel_size": ns.voxel_size,
        "chi": ns.chi,
        "radius": ns.radius,
    }
    if ns.center is not None:
        cfg["center"] = ns.center
    if ns.shape == "cylinder":
        cfg.update(axis=ns.axis, half_length=ns.half_length)
    if ns.shape == "ellipsoid_mixture":
        cfg.update(seed=ns.seed, n_components=ns.n_components)
    spec = spec_from_mapping(cfg)
    vol = make_phantom(spec)
    save_volume(vol, ns.out)
    print(f"{spec.shape} phantom {vol.dims} with {len(spec.components)} component(s) -> {ns.out}")


def cmd_forward(ns):
    chi = load_volume(ns.chi)
    b0 = check_unit_vector(ns.b0, "b0", normalize=True)
    out_dims = None if ns.out_dims is None else check_triple(ns.out_dims, "out-dims")
    acq = simulate_acquisition(chi, b0, out_dims, NoiseSpec(ns.noise_sigma, ns.seed))
    save_volume(acq.phi, ns.out)
    print(f"field {acq.phi.dims} voxel {acq.phi.voxel_size} b0 {tuple(round(c, 6) for c in b0)} -> {ns.out}")


def cmd_tkd(ns):
    phi = load_volume(ns.field)
    kernel = dipole_kernel(phi.dims, phi.voxel_size, phi.b0_dir)
    chi = tkd_invert(phi, kernel, ns.threshold)
    save_volume(chi, ns.out)
    print(f"tkd threshold {ns.threshold} -> {ns.out}")


def resolve_train_settings(ns):
    preset = TRAIN_PRESETS[ns.preset]
    for key, value in preset.items():
        if getattr(ns, key) is None:
            setattr(ns, key, value)
    return ns


def cmd_train(ns):
    volumes = [load_volume(p) for p in ns.volumes]
    norm = NormalizationSpec(ns.chi_scale)
    dataset = build_dataset(volumes, ns.patch_size, ns.stride, norm)
    if ns.max_patches is not None and len(dataset) > ns.max_patches:
        dataset.patches = dataset.patches[: ns.max_patches]
    print(f"dataset: {len(dataset)} patches of {ns.patch_size}^3")
    arch = DenoiserArch(ns.base_width, ns.num_blocks, ns.time_embed_dim)
    hyper = TrainHyper(lr=ns.lr, batch=ns.batch_size, steps=ns.steps, seed=ns.seed)
    model = train(dataset, arch, make_schedule(), hyper, norm)
    save_model(model, ns.out)
    losses = np.asarray(model.train_meta["losses"])
    if losses.size:
        k = min(100, losses.size)
        print(f"loss first-{k} mean {losses[:k].mean():.5f} last-{k} mean {losses[-k:].mean():.5f}")
    print(f"trained {ns.steps} steps in {model.train_meta['seconds']:.1f} s -> {ns.out}")


def cmd_invert(ns):
    phi = load_volume(ns.field)
    model = load_model(ns.model)
    cfg = GuidanceConfig(
        xi1=ns.xi1,
        xi2=ns.xi2,
        lam=ns.lam,
        tkd_threshold=ns.tkd_threshold,
        jacobian_mode=ns.jacobian_mode,
        tv_epsilon=ns.tv_epsilon,
        ddim_steps=ns.ddim_steps,
        eta=ns.eta,
        grad_scaling=ns.grad_scaling,
        step_rule=ns.step_rule,
        step_budget=ns.step_budget,
        backprojection=ns.backprojection,
    )
    if ns.threads < 1:
        raise ParameterError("--threads must be >= 1")
    model_voxel = check_triple(ns.model_voxel, "model-voxel", kind=float)
    res = sample(phi, model, cfg, ns.patch_size, ns.overlap, seed=ns.seed, model_voxel=model_voxel,
                 threads=ns.threads)
    save_volume(res.chi, ns.out)
    if ns.diagnostics:
        write_trace(res.trace, ns.diagnostics)
    if res.trace:
        print(f"dipinv {res.trace[0].dipinv:.6g} -> {res.trace[-1].dipinv:.6g}")
    print(f"estimate {res.chi.dims} -> {ns.out}")


def cmd_eval(ns):
    pred = load_volume(ns.pred)
    ref = load_volume(ns.ref)
    if ns.mask is not None:
        mvol = load_volume(ns.mask)
        mask = mvol.mask if mvol.mask is not None else mvol.data != 0
    else:
        mask = ref.mask
    report = evaluate(pred, ref, mask).to_dict()
    text = json.dumps(report, sort_keys=True)
    if ns.out:
        with open(ns.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


COMMANDS = {
    "phantom": cmd_phantom,
    "forward": cmd_forward,
    "tkd": cmd_tkd,
    "train": cmd_train,
    "invert": cmd_invert,
    "eval": cmd_eval,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        ns = parse_args(argv)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if ns.command == "train":
        resolve_train_settings(ns)
    print_config(ns)
    try:
        COMMANDS[ns.command](ns)
    except QSMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
