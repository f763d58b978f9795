"""
Command-line entry point: phantom, train, predict, evaluate, assess and viz-attention
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import SOURCE_FLAG, apply_threads, resolve, resolve_threads
from errors import HdanError, InvalidConfig
from inference import predict_volume
from metrics import compare_methods, read_report, render_summary
from network import ABLATION_FLAGS, ABLATION_PRESETS, build_network, count_parameters
from study_manager import StudyManager, stored_intensities
from training import load_checkpoint, restore_network, train
from visualization import export_attention_images, parse_slice, save_segmentation_panel
from volume_io import (
    load_scalar_volume,
    load_volume,
    normalize,
    pair_modalities,
    save_labelmap,
    save_scalar_volume,
)

logger = logging.getLogger('hdan')

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
OUTPUT_SUFFIX = {'internal': '.meta', 'nifti': '.nii.gz', 'analyze': '.hdr'}


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format=LOG_FORMAT, force=True)


def cmd_phantom(args) -> int:
    result = StudyManager().generate_phantoms(args.out, count=args.count, size=args.size,
                                              delta=args.delta, sigma=args.sigma, seed=args.seed)
    print(json.dumps(result, indent=2, ensure_ascii=False))
    return 0


def cmd_train(args) -> int:
    overrides = {'training': {'max_epochs': args.epochs, 'seed': args.seed, 'max_steps': args.max_steps}}
    resolved = resolve(args.config, overrides)
    network = resolved.network
    if args.preset:
        network = network.with_preset(args.preset)
        for flag in ABLATION_FLAGS.values():
            resolved.sources[f'network.{flag}'] = SOURCE_FLAG
    if args.ablate:
        network = network.ablate(*args.ablate)
        for name in args.ablate:
            resolved.sources[f'network.{ABLATION_FLAGS[name]}'] = SOURCE_FLAG
    resolved.network = network
    resolved.log_effective()
    logger.info("Network has %d parameters", count_parameters(network))

    dataset = StudyManager(label_mapping=resolved.explicit_label_mapping).load_dataset(args.data)
    net = build_network(network, seed=resolved.training.seed)
    run = train(net, dataset, resolved.training, out_dir=args.out, resume_from=args.resume)
    print(json.dumps({'epochs': run.checkpoint.epoch, 'steps': run.steps,
                      'loss_history': run.loss_history,
                      'checkpoint': str(run.checkpoint_paths[-1]) if run.checkpoint_paths else None},
                     indent=2))
    return 0


def cmd_predict(args) -> int:
    paths = [p for p in args.inputs.split(',') if p]
    if len(paths) != 2:
        raise InvalidConfig(f"--in expects T1,T2 paths, got {args.inputs!r}")
    ckpt = load_checkpoint(args.checkpoint)
    overrides = {'inference': {'trace_attention': True if args.attention else None,
                               'attention_stage': args.stage, 'workers': args.workers}}
    # only [network] keys set in the file can disagree with the checkpoint
    resolved = resolve(args.config, overrides, base_network=ckpt.network_config)
    resolved.log_effective()

    net = restore_network(ckpt, expected=resolved.network)
    t1 = load_volume(paths[0], 'T1')
    volume = normalize(pair_modalities(t1, load_volume(paths[1], 'T2')))
    truth = load_volume(args.truth, 'label', label_mapping=resolved.explicit_label_mapping) if args.truth else None
    prediction = predict_volume(net, volume, resolved.inference)

    out = Path(args.out)
    subject = volume.subject_id or 'subject'
    suffix = OUTPUT_SUFFIX[args.format]
    label_path = out / f"{subject}_pred{suffix}"
    save_labelmap(prediction.labels, label_path, fmt=args.format,
                  intensities=stored_intensities(resolved.label_mapping))
    written = [str(label_path)]
    if prediction.attention is not None:
        attention_path = out / f"{subject}_attention{suffix}"
        save_scalar_volume(prediction.attention, volume.spacing, attention_path, fmt=args.format,
                           subject_id=subject, modality='attention')
        written.append(str(attention_path))
        images = export_attention_images(prediction.attention, out, subject, args.slice, t1=t1.data[0])
        written.extend(str(p) for p in images)
    if truth is not None:
        axis, index = parse_slice(args.slice, truth.shape)
        panel = save_segmentation_panel(t1.data[0], truth.labels, prediction.labels.labels,
                                        out / f"{subject}_panel_a{axis}_s{index}.png", axis, index)
        written.append(str(panel))
    print(json.dumps({'subject_id': subject, 'written': written}, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    result = StudyManager().evaluate_segmentations(args.pred, args.truth, report_path=args.out)
    if not args.summary:
        for row in result['scores']:
            print(f"{row['subject_id']}\t{row['class']}\t{row['dice']}\t{row['mhd']}\t{row['flags'] or ''}")
    print(render_summary(result['summary']))
    if result['failures']:
        logger.warning("%d subject(s) could not be evaluated", result['failures'])
    if args.compare:
        comparison = compare_methods(read_report(args.out), read_report(args.compare))
        for name, row in comparison.items():
            print(f"{name}: dice {row['mean_a']:.4f} vs {row['mean_b']:.4f} "
                  f"(n={row['n']}, paired t={row['t_statistic']:.3f}, p={row['p_value']:.4g})")
    return 0


def cmd_assess(args) -> int:
    result = StudyManager().assess_cohort(args.manifest, pred_dir=args.pred, table_path=args.out,
                                          csv_path=args.csv, include_std=args.std)
    print(result['table'])
    return 0


def cmd_viz_attention(args) -> int:
    attention, _ = load_scalar_volume(args.attention)
    t1 = load_scalar_volume(args.t1)[0] if args.t1 else None
    stem = Path(args.attention).name.split('.')[0]
    for path in export_attention_images(attention, args.out, stem, args.slice, t1=t1):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='hdan', description='Infant brain MRI tissue segmentation toolkit')
    parser.add_argument('--threads', type=int, default=None,
                        help='cap on compute threads (falls back to $HDAN_THREADS)')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('phantom', help='write synthetic isointense phantoms and a manifest')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--count', type=int, default=1, help='number of phantoms (default 1)')
    p.add_argument('--size', type=int, default=64, help='edge length in voxels, >= 32 and divisible by 16')
    p.add_argument('--delta', type=float, default=0.1, help='WM-GM contrast on a unit intensity range')
    p.add_argument('--sigma', type=float, default=0.05, help='Gaussian noise standard deviation')
    p.add_argument('--seed', type=int, default=0, help='seed of the first phantom')
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser('train', help='train a network on a subject manifest')
    p.add_argument('--config', help='INI file with [network], [training], [data] sections')
    p.add_argument('--data', required=True, help='manifest CSV with subject_id,t1,t2,label columns')
    p.add_argument('--out', required=True, help='directory for checkpoints and the training log')
    p.add_argument('--preset', choices=sorted(ABLATION_PRESETS), help='ablation preset for the network')
    p.add_argument('--ablate', nargs='+', choices=sorted(ABLATION_FLAGS), metavar='COMPONENT',
                   help='components to switch off: dense_up, ca, sa')
    p.add_argument('--resume', help='checkpoint to continue training from')
    p.add_argument('--epochs', type=int, help='override max_epochs')
    p.add_argument('--max-steps', type=int, dest='max_steps', help='stop after this many optimizer steps')
    p.add_argument('--seed', type=int, help='override the training seed')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('predict', help='segment one subject with a trained checkpoint')
    p.add_argument('--checkpoint', required=True, help='checkpoint file written by train')
    p.add_argument('--in', dest='inputs', required=True, metavar='T1,T2',
                   help='comma-separated T1 and T2 volumes; both are required')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--config', help='INI file; [network] keys it sets must match the checkpoint')
    p.add_argument('--attention', action='store_true', help='also export the spatial attention map and PNGs')
    p.add_argument('--stage', type=int, help='dense stage whose attention is exported (default 1)')
    p.add_argument('--slice', metavar='AXIS:INDEX', help='slice for PNG export (default middle of axis 2)')
    p.add_argument('--truth', metavar='LABEL',
                   help='ground-truth label volume; writes a T1 / truth / prediction panel')
    p.add_argument('--workers', type=int, help='patch worker threads')
    p.add_argument('--format', choices=sorted(OUTPUT_SUFFIX), default='internal', help='output file format')
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser('evaluate', help='Dice and MHD of predictions against ground truth')
    p.add_argument('--pred', required=True, help='directory of <subject>_pred volumes')
    p.add_argument('--truth', required=True, help='directory of <subject>_label volumes')
    p.add_argument('--out', required=True, help='report CSV path')
    p.add_argument('--summary', action='store_true', help='print only the per-class mean table')
    p.add_argument('--compare', metavar='REPORT', help='second report CSV for a paired t-test per class')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('assess', help='tissue volumes and preterm/term cohort comparison')
    p.add_argument('--manifest', required=True, help='cohort CSV with subject_id,group,path columns')
    p.add_argument('--pred', help='directory that relative manifest paths are resolved against')
    p.add_argument('--out', required=True, help='text table output path')
    p.add_argument('--csv', help='per-subject volumes CSV output path')
    p.add_argument('--std', action='store_true', help='print mean ± SD cells')
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser('viz-attention', help='render PNG slices of a saved attention volume')
    p.add_argument('--attention', required=True, help='attention volume written by predict --attention')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--t1', help='T1 volume for a grey-scale overlay')
    p.add_argument('--slice', metavar='AXIS:INDEX', help='slice to render (default middle of axis 2)')
    p.set_defaults(func=cmd_viz_attention)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        apply_threads(resolve_threads(args.threads))
        return args.func(args)
    except HdanError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected failure in %s: %s", args.command, e)
        return 1


def run():
    sys.exit(main())


if __name__ == '__main__':
    run()
