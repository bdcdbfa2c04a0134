# Copyright 2021 SNOW toolbox developers

# Licensed under the Apache License, Version 2.0 (the "License"); you may not use
# this file except in compliance with the License. You may obtain a copy of the
# License at http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software distributed
# under the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR
# CONDITIONS OF ANY KIND, either express or implied. See the License for the
# specific language governing permissions and limitations under the License.
"""
Command line front end of the SNOW toolbox

    snow corrupt  --input manifest.yaml --output noisy/manifest.yaml --detection-rho 0.4 ...
    snow tile     --input manifest.yaml --output tiles/manifest.yaml --size 256 --overlap 128
    snow eval     --gt gt/manifest.yaml --pred pred/manifest.yaml --output-dir report
    snow monitor  --trace losses.jsonl --patience 10 --min-delta 0.01 [--follow]
    snow report   --input report/metrics.yaml --formats txt csv

Parameters are resolved as defaults < yaml configuration (--config or $SNOW_CONFIG)
< command line flags. Default output locations live under $SNOW_OUTPUT_DIR.

Exit status: 0 on success, 1 on a configuration error, 2 on a data or file error.
Diagnostics go to stderr, one JSON summary line per run goes to stdout.
"""
import argparse
import json
import logging
import os
import sys

import pandas as pd

from SNOW_toolbox import __version__
from SNOW_toolbox.annotations import ConfigError, DataError, NoiseSpec
from SNOW_toolbox.corruption import apply_noise_pipeline
from SNOW_toolbox.evaluation import evaluate_dataset
from SNOW_toolbox.ioTools.FileTools import CONFIG_SECTIONS, load_config, load_dataset, save_dataset, save_yaml
from SNOW_toolbox.stopping import (LossTrace, TwoStageSchedule, follow_trace, run_early_stop,
                                   savgol_smooth, stop_summary, two_stage_run)
from SNOW_toolbox.tiling import sampling_weights, tile_dataset
from SNOW_toolbox.utilities import (REPORT_FORMATS, breakdown_to_dict, read_report, read_trace, report_to_dict,
                                    write_log, write_report)

logger = logging.getLogger('SNOW_toolbox.cli')

# config parameter -> command line flag, for error messages
FLAG_NAMES = {'detection_rho': '--detection-rho',
              'classification_rho': '--classification-rho',
              'seed': '--seed',
              'epsilon_px': '--epsilon',
              'ellipse_scale': '--ellipse-scale',
              'ellipse_samples': '--ellipse-samples',
              'smooth_radius_px': '--smooth-radius',
              'patience': '--patience',
              'min_delta': '--min-delta',
              'max_epochs': '--max-epochs',
              'mode': '--mode',
              'size': '--size',
              'overlap': '--overlap',
              'overseg_criterion': '--overseg-criterion',
              'overseg_threshold': '--overseg-threshold',
              'precision_attribution': '--precision-attribution',
              'formats': '--formats',
              'window': '--smooth-window'}


class SnowArgumentParser(argparse.ArgumentParser):
    '''Usage errors become ConfigError so they share the exit status of bad parameters'''

    def error(self, message):
        raise ConfigError('{}: {}'.format(self.prog, message))


def _default_output(*parts):
    return os.path.join(os.environ.get('SNOW_OUTPUT_DIR', 'snow_output'), *parts)


def _set(target, key, value):
    if value is not None:
        target[key] = value


# ------------------------------------ corrupt ------------------------------------
def resolve_noise_params(args, config):
    noise = dict(config['noise_params'])
    _set(noise, 'detection_rho', args.detection_rho)
    _set(noise, 'classification_rho', args.classification_rho)
    _set(noise, 'seed', args.seed)
    from_config = bool(noise.get('segmentation'))
    segmentation = dict(noise.get('segmentation') or {})
    _set(segmentation, 'enabled', args.segmentation)
    _set(segmentation, 'epsilon_px', args.epsilon)
    _set(segmentation, 'ellipse_scale', args.ellipse_scale)
    _set(segmentation, 'ellipse_samples', args.ellipse_samples)
    _set(segmentation, 'merge_enabled', args.merge)
    _set(segmentation, 'smooth_radius_px', args.smooth_radius)
    if segmentation:
        if not from_config:
            # stage settings given on the command line stay off without --segmentation
            segmentation.setdefault('enabled', False)
        noise['segmentation'] = segmentation
    return noise


def cmd_corrupt(args, config, run):
    spec = NoiseSpec.from_dict(resolve_noise_params(args, config))
    inp = args.input or config['path_params'].get('input_manifest')
    if not inp:
        raise ConfigError('corrupt needs an input manifest (--input or path_params: input_manifest)',
                          parameter='input')
    out = args.output or config['path_params'].get('output_manifest') or _default_output('corrupted', 'manifest.yaml')
    log_path = args.log or os.path.join(os.path.dirname(os.path.abspath(out)), 'corruption_log.jsonl')

    dataset = load_dataset(inp)
    run.watch(os.path.dirname(os.path.abspath(out)), os.path.dirname(os.path.abspath(log_path)))
    noisy, log = apply_noise_pipeline(dataset, spec, processes=args.threads)
    provenance = {**noisy.provenance,
                  'parent_manifest': os.path.relpath(os.path.abspath(inp), os.path.dirname(os.path.abspath(out))),
                  'config': {'noise_params': spec.to_dict()}}
    save_dataset(noisy, out, provenance)
    write_log(log_path, log)
    return {'manifest': out, 'log': log_path, **log.summary()}


# -------------------------------------- tile --------------------------------------
def cmd_tile(args, config, run):
    tile_params = dict(config['tile_params'])
    _set(tile_params, 'size', args.size)
    _set(tile_params, 'overlap', args.overlap)
    size, overlap = tile_params.get('size', 256), tile_params.get('overlap', 0)
    inp = args.input or config['path_params'].get('input_manifest')
    if not inp:
        raise ConfigError('tile needs an input manifest (--input or path_params: input_manifest)', parameter='input')
    out = args.output or _default_output('tiles', 'manifest.yaml')

    dataset = load_dataset(inp)
    tiles = tile_dataset(dataset, size, overlap)
    run.watch(os.path.dirname(os.path.abspath(out)))
    provenance = {**dataset.provenance,
                  'parent_manifest': os.path.relpath(os.path.abspath(inp), os.path.dirname(os.path.abspath(out))),
                  'config': {'tile_params': {'size': size, 'overlap': overlap}}}
    save_dataset(tiles, out, provenance)

    weights = sampling_weights(tiles.images, dataset.class_counts())
    weights_path = os.path.join(os.path.dirname(os.path.abspath(out)), 'sampling_weights.csv')
    pd.DataFrame({'image_id': [img.image_id for img in tiles.images], 'weight': weights}).to_csv(
        weights_path, index=False, float_format='%.6f', lineterminator='\n')
    return {'manifest': out, 'tiles': len(tiles.images), 'weights': weights_path}


# -------------------------------------- eval --------------------------------------
def cmd_eval(args, config, run):
    eval_params = dict(config['eval_params'])
    _set(eval_params, 'overseg_criterion', args.overseg_criterion)
    _set(eval_params, 'overseg_threshold', args.overseg_threshold)
    _set(eval_params, 'precision_attribution', args.precision_attribution)
    gt_path = args.gt or config['path_params'].get('gt_manifest')
    pred_path = args.pred or config['path_params'].get('pred_manifest')
    if not gt_path or not pred_path:
        raise ConfigError('eval needs --gt and --pred manifests', parameter='gt' if not gt_path else 'pred')
    outdir = args.output_dir or config['path_params'].get('report_dir') or _default_output('report')

    gt = load_dataset(gt_path)
    pred = load_dataset(pred_path, predicted=True)
    report = evaluate_dataset(gt, pred,
                              criterion=eval_params.get('overseg_criterion', 'coverage'),
                              threshold=eval_params.get('overseg_threshold', 0.5),
                              attribution=eval_params.get('precision_attribution', 'predicted'),
                              processes=args.threads)
    report_dict = report_to_dict(report)
    report_dict['config'].update({'gt': gt.name, 'pred': pred.name})

    run.watch(outdir)
    paths = write_report(report_dict, outdir, args.formats or REPORT_FORMATS)
    paths.append(save_yaml(outdir, 'per_image.yaml', breakdown_to_dict(report)))
    det = report_dict['detection']['overall']
    return {'outputs': paths, 'precision': det['precision'], 'recall': det['recall'],
            'balanced_accuracy': report_dict['classification']['balanced_accuracy']}


# ------------------------------------- monitor -------------------------------------
def resolve_schedule(args, config):
    stop_params = dict(config['stop_params'])
    _set(stop_params, 'patience', args.patience)
    _set(stop_params, 'min_delta', args.min_delta)
    _set(stop_params, 'max_epochs', args.max_epochs)
    _set(stop_params, 'mode', args.mode)
    return TwoStageSchedule.from_dict(stop_params)


def cmd_monitor(args, config, run):
    schedule = resolve_schedule(args, config)
    trace_path = args.trace or config['path_params'].get('loss_trace')
    if not trace_path:
        raise ConfigError('monitor needs a loss trace (--trace)', parameter='trace')

    if args.follow:
        decisions = args.decisions or os.path.splitext(trace_path)[0] + '_decisions.jsonl'
        run.watch(os.path.dirname(os.path.abspath(decisions)))
        summary = follow_trace(trace_path, decisions, schedule.stage1,
                               schedule.stage2 if args.two_stage else None,
                               poll_interval=args.poll_interval, timeout=args.timeout)
        summary['decisions'] = decisions
    else:
        traces = read_trace(trace_path)
        if args.trace2:
            second = read_trace(args.trace2)
            traces[2] = LossTrace(second[min(second)].losses, 2)
        if 1 not in traces:
            raise DataError('{} holds no stage 1 records'.format(trace_path))
        if 2 in traces:
            summary = two_stage_run(traces[1], traces[2], schedule)
        else:
            _, _, state = run_early_stop(traces[1], schedule.stage1)
            summary = {'stage1': stop_summary(state, schedule.stage1, 1),
                       'best': {'stage': 1, 'epoch': state.best_epoch}}
        if args.smooth_window:
            summary['smoothed'] = {stage: [round(float(v), 6) for v in savgol_smooth(trace, args.smooth_window).losses]
                                   for stage, trace in sorted(traces.items())}

    if args.output:
        run.watch(os.path.dirname(os.path.abspath(args.output)))
        save_yaml('', args.output, summary)
        summary['output'] = args.output
    return summary


# -------------------------------------- report --------------------------------------
def cmd_report(args, config, run):
    report_dict = read_report(args.input)
    if not isinstance(report_dict, dict) or 'detection' not in report_dict:
        raise DataError('{} is not a metrics report'.format(args.input))
    outdir = args.output_dir or os.path.dirname(os.path.abspath(args.input))
    run.watch(outdir)
    basename = os.path.splitext(os.path.basename(args.input))[0]
    return {'outputs': write_report(report_dict, outdir, args.formats or ('txt', 'csv'), basename)}


# ------------------------------------- front end -------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=os.environ.get('SNOW_CONFIG'),
                        help='yaml configuration file [default: $SNOW_CONFIG]')
    common.add_argument('--threads', type=int, default=os.cpu_count() or 1,
                        help='size of the per-image process pool [default: all cores]')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v for INFO, -vv for DEBUG')

    parser = SnowArgumentParser(prog='snow', description='Annotation noise, evaluation and early stopping '
                                                         'for nuclei instance segmentation.')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    sub = parser.add_subparsers(dest='command', required=True, parser_class=SnowArgumentParser)

    p = sub.add_parser('corrupt', parents=[common], help='inject annotation noise into a dataset')
    p.add_argument('--input', help='input manifest')
    p.add_argument('--output', help='output manifest [default: $SNOW_OUTPUT_DIR/corrupted/manifest.yaml]')
    p.add_argument('--log', help='corruption log [default: corruption_log.jsonl next to the output]')
    p.add_argument('--detection-rho', type=float, help='fraction of instances removed per class')
    p.add_argument('--classification-rho', type=float, help='fraction of instances relabelled per class')
    p.add_argument('--seed', type=int, help='master seed')
    p.add_argument('--segmentation', action=argparse.BooleanOptionalAction, default=None,
                   help='enable contour distortion')
    p.add_argument('--epsilon', type=float, help='Douglas-Peucker tolerance [px]')
    p.add_argument('--ellipse-scale', type=float, help='factor applied to the fitted semi-axes')
    p.add_argument('--ellipse-samples', type=int, help='vertices sampled on each fitted ellipse')
    p.add_argument('--merge', action=argparse.BooleanOptionalAction, default=None,
                   help='merge touching nuclei of the same class')
    p.add_argument('--smooth-radius', type=float, help='closing radius of merged nuclei [px]')
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser('tile', parents=[common], help='cut the images of a dataset into tiles')
    p.add_argument('--input', help='input manifest')
    p.add_argument('--output', help='output manifest [default: $SNOW_OUTPUT_DIR/tiles/manifest.yaml]')
    p.add_argument('--size', type=int, help='tile side [px], default 256')
    p.add_argument('--overlap', type=int, help='overlap of neighbouring tiles [px], default 0')
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser('eval', parents=[common], help='score predictions against ground truth')
    p.add_argument('--gt', help='ground-truth manifest')
    p.add_argument('--pred', help='prediction manifest')
    p.add_argument('--output-dir', help='report directory [default: $SNOW_OUTPUT_DIR/report]')
    p.add_argument('--overseg-criterion', help="'coverage' (default) or 'iou'")
    p.add_argument('--overseg-threshold', type=float, help='over-/under-segmentation overlap, default 0.5')
    p.add_argument('--precision-attribution', help="'predicted' (default) or 'true'")
    p.add_argument('--formats', nargs='+', help='report formats among {}'.format(', '.join(REPORT_FORMATS)))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('monitor', parents=[common], help='early stopping on a loss trace')
    p.add_argument('--trace', help='line-delimited loss trace')
    p.add_argument('--trace2', help='stage 2 loss trace, when kept in a separate file')
    p.add_argument('--patience', type=int, help='default 10')
    p.add_argument('--min-delta', type=float, help='default 0.001')
    p.add_argument('--max-epochs', type=int, help='default 50')
    p.add_argument('--mode', help="'paper-verbatim' (default) or 'conventional'")
    p.add_argument('--smooth-window', type=int, help='add Savitzky-Golay smoothed losses to the summary')
    p.add_argument('--output', help='yaml summary file')
    p.add_argument('--follow', action='store_true', help='follow an appended trace and emit decisions')
    p.add_argument('--two-stage', action='store_true', help='in follow mode, expect stage 2 records')
    p.add_argument('--decisions', help='decision file of follow mode [default: <trace>_decisions.jsonl]')
    p.add_argument('--poll-interval', type=float, default=1.0, help='seconds between polls')
    p.add_argument('--timeout', type=float, help='seconds without new records before giving up')
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser('report', parents=[common], help='render a saved yaml report')
    p.add_argument('--input', required=True, help='metrics.yaml written by eval')
    p.add_argument('--output-dir', help='[default: directory of the input]')
    p.add_argument('--formats', nargs='+', help='report formats among {}'.format(', '.join(REPORT_FORMATS)))
    p.set_defaults(func=cmd_report)
    return parser


class OutputGuard():
    '''Remembers the files present in output directories so a failed run can remove its own'''

    def __init__(self):
        self.before = {}

    def watch(self, *directories):
        for directory in directories:
            if directory not in self.before:
                self.before[directory] = self._listing(directory)

    @staticmethod
    def _listing(directory):
        found = set()
        for root, _, files in os.walk(directory):
            found.update(os.path.join(root, f) for f in files)
        return found

    def cleanup(self):
        for directory, before in self.before.items():
            for path in sorted(self._listing(directory) - before):
                logger.debug('Removing partial output %s', path)
                os.remove(path)


def _describe(err):
    flag = FLAG_NAMES.get(getattr(err, 'parameter', None))
    return '{}: {}'.format(flag, err) if flag else str(err)


def main(argv=None):
    '''Entry point of the ``snow`` console script, returns the exit status'''
    run = OutputGuard()
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as err:
        sys.stderr.write('error: {}\n'.format(err))
        return 1

    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError('--threads must be >= 1, got {}'.format(args.threads))
        config = load_config(args.config) if args.config else {section: {} for section in CONFIG_SECTIONS}
        result = args.func(args, config, run)
    except ConfigError as err:
        logger.error(_describe(err))
        run.cleanup()
        return 1
    except (DataError, OSError) as err:
        logger.error(_describe(err))
        run.cleanup()
        return 2

    sys.stdout.write(json.dumps({'command': args.command, 'status': 'ok', **result}, default=str) + '\n')
    return 0


if __name__ == '__main__':
    sys.exit(main())
