"""
harmnet command line
One entry point for the basis, shift identity, accounting, conversion,
compression, training, evaluation and benchmark tools.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

import bench
from compression import account, frequency_shares, parse_strategy, plan
from config import DTYPES, get_settings, resolve_dtype, setup_logging
from converter import compress_model, convert_model, spectral_weights
from data_io import load_data, load_model, save_model, write_container, write_history_csv
from dct_basis import NORM_MODES, make_basis, select_spectrum, shift_test_signal, sine_shift_delta, \
    verify_shift_equivalence
from errors import ConfigError, DataFormatError, HarmNetError, NonIntegerShiftError, ResidualError, UsageError
from model_spec import load_spec
from nn_train import TrainConfig, build_preset, evaluate, train

logger = logging.getLogger(__name__)

SHIFT_TOLERANCE = 1e-9


class HarmNetParser(argparse.ArgumentParser):
    """Usage errors print the (sub)command's flag table and surface as UsageError"""

    def __init__(self, *args, **kwargs):
        # flags must be spelled out: '--lam' is not '--lambda'
        kwargs.setdefault('allow_abbrev', False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='Random seed (default HARMNET_SEED)')
    common.add_argument('--dtype', choices=sorted(DTYPES), default=None, help='Floating point type')
    common.add_argument('--out', type=str, default=None, help='Output file')
    common.add_argument('--config', type=str, default=None, help='JSON file of flag values')
    common.add_argument('--log-level', type=str, default=None, help='Logging level')
    return common


def _strategy_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--strategy', choices=['none', 'uniform', 'progressive', 'adaptive'], default='none')
    parser.add_argument('--lambda', dest='lam', type=int, default=None, help='Uniform truncation level')
    parser.add_argument('--alpha', type=int, default=2, help='Progressive lower bound (1 or 2)')
    parser.add_argument('--t', type=float, default=None, help='Progressive T or adaptive threshold')
    parser.add_argument('--override', action='append', default=[], metavar='RES=L',
                        help='Progressive lambda for a feature resolution, e.g. 16x16=3')
    parser.add_argument('--first-lambda', type=int, default=None, help='Explicit lambda for the first block')
    parser.add_argument('--no-exempt-first', action='store_true', help='Compress the first block too')


def build_parser() -> HarmNetParser:
    parser = HarmNetParser(prog='harmnet', description='DCT harmonic blocks: basis, compression, training')
    common = _common_flags()
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('basis', parents=[common], help='Print (and save) a DCT basis')
    p.add_argument('--size', type=int, required=True, help='Kernel size K')
    p.add_argument('--norm', choices=NORM_MODES, default='orthonormal')
    p.add_argument('--lambda', dest='lam', type=int, default=None, help='Only list the retained filters')

    p = sub.add_parser('shift-check', parents=[common], help='Check the sine-via-shifted-cosine identity')
    p.add_argument('--n', type=int, required=True, help='Signal length')
    p.add_argument('--k', type=int, required=True, help='Frequency')
    p.add_argument('--z', type=int, default=0, help='Integer offset')

    p = sub.add_parser('account', parents=[common], help='Parameter and multiply-add accounting')
    p.add_argument('--arch', type=str, default=None, help='Preset name or JSON model spec')
    p.add_argument('--model', type=str, default=None, help='Model container (adaptive weights)')
    p.add_argument('--scale', type=float, default=None, help='Preset width scale')
    p.add_argument('--classes', type=int, default=None)
    p.add_argument('--input-channels', type=int, default=None)
    p.add_argument('--json', action='store_true', help='Print the report as JSON')
    _strategy_flags(p)

    p = sub.add_parser('convert', parents=[common], help='Convert a conventional model to harmonic blocks')
    p.add_argument('--in', dest='input', type=str, required=True, help='Model container')
    p.add_argument('--norm', choices=NORM_MODES, default='orthonormal')
    p.add_argument('--json', action='store_true', help='Print the report as JSON')
    _strategy_flags(p)

    p = sub.add_parser('compress', parents=[common], help='Drop frequencies from a harmonic model')
    p.add_argument('--in', dest='input', type=str, required=True, help='Model container')
    p.add_argument('--json', action='store_true', help='Print the report as JSON')
    _strategy_flags(p)

    p = sub.add_parser('train', parents=[common], help='Train a preset on synthetic or small NORB data')
    p.add_argument('--arch', type=str, default='harmnet2')
    p.add_argument('--data', type=str, default='synth')
    p.add_argument('--init', type=str, default=None, help='Start from a model container')
    p.add_argument('--epochs', type=int, default=30)
    p.add_argument('--lr', type=float, default=0.01)
    p.add_argument('--momentum', type=float, default=0.9)
    p.add_argument('--weight-decay', type=float, default=5e-4)
    p.add_argument('--batch-size', type=int, default=64)
    p.add_argument('--lr-steps', type=str, default='', help='Comma separated decay epochs')
    p.add_argument('--lr-decay', type=float, default=0.1)
    p.add_argument('--dropout', type=float, default=None)
    p.add_argument('--scale', type=float, default=1.0)
    p.add_argument('--lambda', dest='lam', type=int, default=None)
    p.add_argument('--drop-dc', action='store_true', help='Remove DC from the first harmonic block')
    p.add_argument('--no-spectrum-bn', action='store_true', help='No spectrum BN in the first block')
    p.add_argument('--pad-crop', type=int, default=0)
    p.add_argument('--flip', action='store_true')
    p.add_argument('--brightness', type=float, default=0.0)
    p.add_argument('--contrast', type=float, default=0.0)
    p.add_argument('--augment-dark-only', action='store_true')
    p.add_argument('--history', type=str, default=None, help='History CSV path')

    p = sub.add_parser('eval', parents=[common], help='Evaluate a model container')
    p.add_argument('--model', type=str, required=True)
    p.add_argument('--data', type=str, default='synth')
    p.add_argument('--split', choices=['train', 'test'], default='test')
    p.add_argument('--batch-size', type=int, default=256)

    p = sub.add_parser('bench', parents=[common], help='Time conv / two-stage / merged blocks')
    p.add_argument('--catalog', type=str, default=None, help='JSON catalog (default wrn-16-8 shapes)')
    p.add_argument('--case', action='append', default=[], metavar='N,M,K,A,B[,STRIDE]',
                   help='Ad hoc case instead of a catalog')
    p.add_argument('--reps', type=int, default=None)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--lambda', dest='lam', type=int, default=None)

    parser.subcommands = sub.choices
    return parser


# configuration

def _apply_config(parser: HarmNetParser, argv: List[str]):
    """Values from --config become subcommand defaults, so explicit flags still win"""
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument('--config', default=None)
    known, _ = pre.parse_known_args(argv)
    command = next((arg for arg in argv if arg in parser.subcommands), None)
    if not known.config or command is None:
        return
    try:
        values = json.loads(Path(known.config).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {known.config}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{known.config}: not valid JSON ({e})")
    if not isinstance(values, dict):
        raise ConfigError(f"{known.config}: expected a JSON object of flag values")
    subparser = parser.subcommands[command]
    actions = {action.dest: action for action in subparser._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.lstrip('-').replace('-', '_')
        dest = 'lam' if dest == 'lambda' else 'input' if dest == 'in' else dest
        if dest in ('help', 'config') or dest not in actions:
            raise UsageError(f"unknown config key '{key}' for '{command}'")
        # a configured value satisfies a required flag
        actions[dest].required = False
        defaults[dest] = value
    subparser.set_defaults(**defaults)


def _resolve_globals(args: argparse.Namespace):
    settings = get_settings()
    args.seed = settings.seed if args.seed is None else args.seed
    args.dtype = settings.dtype if args.dtype is None else args.dtype
    args.np_dtype = resolve_dtype(args.dtype)
    args.settings = settings


def _overrides(items: List[str]) -> Dict[str, int]:
    overrides = {}
    for item in items:
        key, sep, value = item.partition('=')
        if not sep:
            raise UsageError(f"override '{item}' is not RES=L")
        try:
            overrides[key.strip()] = int(value)
        except ValueError:
            raise UsageError(f"override '{item}' needs an integer lambda")
    return overrides


def _strategy(args: argparse.Namespace):
    return parse_strategy(args.strategy, lam=args.lam, alpha=args.alpha, t=args.t,
                          overrides=_overrides(args.override), first_lambda=args.first_lambda,
                          exempt_first=not args.no_exempt_first)


def _require_out(args: argparse.Namespace, what: str) -> str:
    if not args.out:
        raise UsageError(f"{args.command} needs --out <{what}>")
    return args.out


def _frame(df: pd.DataFrame) -> str:
    return df.to_string(index=False, float_format=lambda v: f"{v:.4g}")


# subcommands

def cmd_basis(args) -> int:
    basis = make_basis(args.size, args.norm, dtype=np.float64)
    selection = select_spectrum(args.size, args.lam) if args.lam is not None else None
    print(f"# K={basis.size} norm={basis.norm_mode}")
    print("index u v level values")
    for p, (u, v) in enumerate(basis.frequencies()):
        if selection is not None and (u, v) not in selection.indices:
            continue
        values = ' '.join(f"{x:+.9f}" for x in basis.filters[p].ravel())
        print(f"{p} {u} {v} {u + v} {values}")
    if args.out:
        write_container(args.out, 'basis', {'filters': basis.filters.astype(args.np_dtype)},
                        {'K': basis.size, 'norm_mode': basis.norm_mode})
    return 0


def cmd_shift_check(args) -> int:
    shift = sine_shift_delta(args.n, args.k, args.z)
    print(f"delta={shift.delta}")
    if not shift.is_integer:
        raise NonIntegerShiftError(shift.delta)
    signal, origin = shift_test_signal(args.n, args.k, args.z, seed=args.seed)
    residual = verify_shift_equivalence(signal, args.n, args.k, args.z, origin)
    print(f"residual={residual:.3e}")
    if residual >= SHIFT_TOLERANCE:
        raise ResidualError(f"residual {residual:.3e} exceeds {SHIFT_TOLERANCE:g}")
    return 0


def cmd_account(args) -> int:
    model = load_model(args.model) if args.model else None
    if args.arch is None and model is None:
        raise UsageError("account needs --arch or --model")
    if args.arch is not None:
        options = {k: v for k, v in (('scale', args.scale), ('classes', args.classes),
                                     ('input_channels', args.input_channels)) if v is not None}
        spec = load_spec(args.arch, **options)
    else:
        spec = model.spec
    strategy = _strategy(args)
    compression = None
    if strategy is not None:
        compression = plan(spec, strategy, spectral_weights(model) if model is not None else None)
    report = account(spec, compression)
    data = report.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(data, indent=2))
    if args.json:
        print(json.dumps(data, indent=2))
        return 0
    print(_frame(report.to_frame()))
    print(f"total params_conv={report.params_conv} params_harm={report.params_harm} "
          f"macs_conv={report.macs_conv} macs_twostage={report.macs_twostage} macs_merged={report.macs_merged}")
    if model is not None:
        for name, weights in spectral_weights(model).items():
            shares = ' '.join(f"{s:.3f}" for s in frequency_shares(weights))
            print(f"shares {name}: {shares}")
    return 0


def cmd_convert(args) -> int:
    out = _require_out(args, 'model-file')
    model = load_model(args.input)
    strategy = _strategy(args)
    compression = plan(model.spec, strategy, spectral_weights(model, args.norm)) if strategy is not None else None
    converted, report = convert_model(model, compression, args.norm)
    save_model(converted, out)
    Path(out).with_suffix('.report.json').write_text(json.dumps(report.to_dict(), indent=2))
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(_frame(report.to_frame()))
        print(f"max_error={report.max_error:.6g} total_error={report.total_error:.6g}")
    return 0


def cmd_compress(args) -> int:
    out = _require_out(args, 'model-file')
    model = load_model(args.input)
    strategy = _strategy(args)
    if strategy is None:
        raise UsageError("compress needs --strategy uniform|progressive|adaptive")
    compressed, report = compress_model(model, plan(model.spec, strategy, spectral_weights(model)))
    save_model(compressed, out)
    before, after = model.parameter_count(), compressed.parameter_count()
    if args.json:
        print(json.dumps({'params_before': before, 'params_after': after,
                          'layers': report.to_frame().to_dict(orient='records')}, indent=2, default=str))
    else:
        print(_frame(report.to_frame()))
        print(f"params_before={before} params_after={after}")
    return 0


def cmd_train(args) -> int:
    train_set, test_set = load_data(args.data, seed=args.seed)
    if args.init:
        model = load_model(args.init)
    else:
        options = {'scale': args.scale, 'image_size': train_set.images.shape[-1]}
        if args.arch.startswith('harmnet'):
            options.update(drop_dc=args.drop_dc, spectrum_bn_first=not args.no_spectrum_bn, lam=args.lam)
        model = build_preset(args.arch, input_channels=train_set.images.shape[1], classes=train_set.classes,
                             seed=args.seed, dtype=args.np_dtype, **options)
    steps = tuple(int(s) for s in args.lr_steps.split(',') if s.strip())
    cfg = TrainConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                      batch_size=args.batch_size, epochs=args.epochs, lr_decay=args.lr_decay,
                      lr_steps=steps, dropout=args.dropout, seed=args.seed, pad_crop=args.pad_crop,
                      flip=args.flip, brightness=args.brightness, contrast=args.contrast,
                      augment_dark_only=args.augment_dark_only, verbose=False)
    history, trained = train(model, train_set, cfg, test_set)
    if args.out:
        save_model(trained, args.out)
    if args.history:
        write_history_csv(history, args.history)
    sys.stdout.write(history.to_csv(index=False))
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    train_set, test_set = load_data(args.data, seed=args.seed)
    dataset = test_set if args.split == 'test' and test_set is not None else train_set
    result = evaluate(model, dataset, args.batch_size)
    print(f"accuracy={result.accuracy:.6f} loss={result.loss:.6f} samples={len(dataset)}")
    print("confusion")
    for row in result.confusion:
        print(' '.join(str(int(v)) for v in row))
    return 0


def _parse_case(text: str, reps: int, lam: Optional[int]) -> bench.BenchCase:
    try:
        values = [int(v) for v in text.split(',')]
    except ValueError:
        raise UsageError(f"bench case '{text}' must be integers N,M,K,A,B[,STRIDE]")
    if len(values) not in (5, 6):
        raise UsageError(f"bench case '{text}' must be N,M,K,A,B[,STRIDE]")
    return bench.BenchCase(*values, lam=lam, reps=reps)


def cmd_bench(args) -> int:
    reps = args.reps if args.reps is not None else args.settings.bench_reps
    if args.case:
        catalog = [_parse_case(text, reps, args.lam) for text in args.case]
    elif args.catalog:
        catalog = bench.load_catalog(args.catalog)
    else:
        catalog = bench.wrn_catalog(16, 8, reps=reps, lam=args.lam)
    report = bench.run_bench(catalog, reps=args.reps, workers=args.workers,
                             dtype=args.np_dtype, seed=args.seed)
    out = Path(args.out or Path(args.settings.output_dir) / 'bench.csv')
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out, index=False)
    print(bench.format_table(report))
    print(f"merged_over_twostage={bench.summary_ratio(report):.3f} "
          f"mac_rank_agreement={bench.mac_rank_agreement(report):.3f} csv={out}")
    return 0


COMMANDS = {
    'basis': cmd_basis,
    'shift-check': cmd_shift_check,
    'account': cmd_account,
    'convert': cmd_convert,
    'compress': cmd_compress,
    'train': cmd_train,
    'eval': cmd_eval,
    'bench': cmd_bench,
}


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one invocation; returns the process exit code"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.log_level:
            setup_logging(args.log_level)
        _resolve_globals(args)
        return COMMANDS[args.command](args)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else 0
    except HarmNetError as e:
        logger.error(f"❌ {e.error_class}: {e}")
        print(f"harmnet: error[{e.error_class}]: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        err = DataFormatError(str(e))
        print(f"harmnet: error[{err.error_class}]: {e}", file=sys.stderr)
        return err.exit_code


def main():
    setup_logging()
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
