'''
End to end runs of the snow command: exit status, JSON summary and output files
'''
import contextlib
import filecmp
import io
import json
import os
import tempfile
import unittest

from SNOW_toolbox import cli, utilities
from SNOW_toolbox.annotations import Dataset
from SNOW_toolbox.ioTools import FileTools
from SNOW_toolbox.stopping import LossTrace
from SNOW_toolbox.toy_data import CLASS_NAMES, make_nuclei_image, make_toy_dataset, three_nuclei_image


def valley_losses():
    return [1.0 - 0.1 * k for k in range(6)] + [0.5 + 0.02 * (k - 5) for k in range(6, 30)]


class TestCommandLine(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name
        self.gt = self.path('gt', 'manifest.yaml')
        FileTools.save_dataset(make_toy_dataset(2, 96, 96), self.gt)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def snow(self, *argv, threads=1):
        '''Run the command line, returning (exit status, JSON summary or None)'''
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            status = cli.main(list(argv) + ['--threads', str(threads)])
        lines = out.getvalue().splitlines()
        return status, (json.loads(lines[-1]) if lines else None)

    def write_trace(self, name, losses):
        utilities.write_trace(self.path(name), LossTrace(losses, 1))
        return self.path(name)

    # ---------------------------------- corrupt ----------------------------------
    def test_corrupt_is_deterministic(self):
        args = ['corrupt', '--input', self.gt, '--detection-rho', '0.3', '--classification-rho', '0.3',
                '--segmentation', '--seed', '7']
        for name, threads in (('a', 1), ('b', 1), ('c', 4)):
            status, summary = self.snow(*args, '--output', self.path(name, 'manifest.yaml'), threads=threads)
            self.assertEqual(status, 0)
            self.assertEqual(summary['command'], 'corrupt')
        for name in ('b', 'c'):
            match, mismatch, errors = filecmp.cmpfiles(
                self.path('a'), self.path(name),
                ['manifest.yaml', 'corruption_log.jsonl', 'masks/img_000.snwb', 'masks/img_001.snwb'],
                shallow=False)
            self.assertEqual((mismatch, errors), ([], []))

        noisy = FileTools.load_dataset(self.path('a', 'manifest.yaml'))
        self.assertEqual(noisy.provenance['parent'], 'toy')
        self.assertEqual(noisy.provenance['noise_spec']['seed'], 7)

    def test_rho_out_of_range(self):
        status, summary = self.snow('corrupt', '--input', self.gt, '--detection-rho', '1.5',
                                    '--output', self.path('bad', 'manifest.yaml'))
        self.assertEqual(status, 1)
        self.assertIsNone(summary)
        self.assertFalse(os.path.exists(self.path('bad', 'manifest.yaml')))

    def test_unknown_flag(self):
        self.assertEqual(self.snow('corrupt', '--input', self.gt, '--noise', '3')[0], 1)

    def test_segmentation_merge(self):
        three = self.path('three', 'manifest.yaml')
        FileTools.save_dataset(Dataset('three', CLASS_NAMES[:2], [three_nuclei_image()]), three)
        status, summary = self.snow('corrupt', '--input', three, '--segmentation', '--epsilon', '2', '--merge',
                                    '--output', self.path('merged', 'manifest.yaml'))
        self.assertEqual(status, 0)
        self.assertEqual(summary['merged'], 1)

        log = utilities.read_log(self.path('merged', 'corruption_log.jsonl'))
        self.assertEqual(len(log.events('distort')), 3)
        self.assertEqual([(r['kept'], r['absorbed']) for r in log.events('merge')], [(1, 2)])
        merged = FileTools.load_dataset(self.path('merged', 'manifest.yaml')).images[0]
        self.assertEqual(sorted(merged.classes), [1, 3])

    def test_missing_input(self):
        status, _ = self.snow('corrupt', '--input', self.path('nothing.yaml'), '--output', self.path('x', 'm.yaml'))
        self.assertEqual(status, 2)

    # ------------------------------------ eval ------------------------------------
    def test_self_evaluation(self):
        status, summary = self.snow('eval', '--gt', self.gt, '--pred', self.gt, '--output-dir', self.path('report'))
        self.assertEqual(status, 0)
        self.assertEqual(summary['precision'], 100.0)
        self.assertEqual(summary['recall'], 100.0)
        self.assertEqual(summary['balanced_accuracy'], 100.0)
        self.assertEqual(sorted(os.listdir(self.path('report'))),
                         ['metrics.csv', 'metrics.txt', 'metrics.yaml', 'per_image.yaml'])

        per_image = FileTools.load_yaml(self.path('report', 'per_image.yaml'))
        self.assertEqual(sorted(per_image), ['img_000', 'img_001'])
        self.assertEqual(per_image['img_000']['counts']['fp'], 0)

    def test_missing_prediction(self):
        status, _ = self.snow('eval', '--gt', self.gt, '--pred', self.path('pred', 'manifest.yaml'),
                              '--output-dir', self.path('report'))
        self.assertEqual(status, 2)

    def test_eval_is_deterministic(self):
        noisy = self.path('noisy', 'manifest.yaml')
        self.snow('corrupt', '--input', self.gt, '--output', noisy, '--detection-rho', '0.3',
                  '--classification-rho', '0.3', '--segmentation', '--seed', '3')
        for name, threads in (('a', 1), ('b', 1), ('c', 4)):
            status, _ = self.snow('eval', '--gt', self.gt, '--pred', noisy, '--output-dir', self.path(name),
                                  threads=threads)
            self.assertEqual(status, 0)
        for name in ('b', 'c'):
            match, mismatch, errors = filecmp.cmpfiles(
                self.path('a'), self.path(name),
                ['metrics.yaml', 'metrics.csv', 'metrics.txt', 'per_image.yaml'], shallow=False)
            self.assertEqual((mismatch, errors), ([], []))

    def test_eval_class_out_of_range(self):
        image = make_nuclei_image('a', 64, 64, seed=2)
        image = image.replace(classes={inst: 4 for inst in image.classes})
        bad = self.path('bad', 'manifest.yaml')
        FileTools.save_dataset(Dataset('bad', CLASS_NAMES + ('extra',), [image]), bad)
        data = FileTools.load_yaml(bad)
        FileTools.save_yaml('', bad, {**data, 'classes': list(CLASS_NAMES)})
        status, summary = self.snow('eval', '--gt', bad, '--pred', bad, '--output-dir', self.path('report'))
        self.assertEqual(status, 2)
        self.assertIsNone(summary)
        self.assertFalse(os.path.exists(self.path('report', 'metrics.yaml')))

    def test_eval_manifest_entry_without_container(self):
        data = FileTools.load_yaml(self.gt)
        entries = [{k: v for k, v in e.items() if k != 'container'} for e in data['images']]
        broken = self.path('broken.yaml')
        FileTools.save_yaml('', broken, {**data, 'images': entries})
        status, _ = self.snow('eval', '--gt', broken, '--pred', self.gt, '--output-dir', self.path('report'))
        self.assertEqual(status, 2)

    def test_bad_criterion(self):
        status, _ = self.snow('eval', '--gt', self.gt, '--pred', self.gt, '--overseg-criterion', 'dice',
                              '--output-dir', self.path('report'))
        self.assertEqual(status, 1)

    def test_report(self):
        self.snow('eval', '--gt', self.gt, '--pred', self.gt, '--output-dir', self.path('report'))
        status, summary = self.snow('report', '--input', self.path('report', 'metrics.yaml'),
                                    '--output-dir', self.path('rendered'), '--formats', 'txt')
        self.assertEqual(status, 0)
        self.assertEqual(summary['outputs'], [self.path('rendered', 'metrics.txt')])
        self.assertTrue(filecmp.cmp(self.path('report', 'metrics.txt'), self.path('rendered', 'metrics.txt'),
                                    shallow=False))

    # ----------------------------------- monitor -----------------------------------
    def test_monitor_valley(self):
        trace = self.write_trace('valley.jsonl', valley_losses())
        status, summary = self.snow('monitor', '--trace', trace, '--patience', '10', '--min-delta', '0.01',
                                    '--smooth-window', '11', '--output', self.path('stop.yaml'))
        self.assertEqual(status, 0)
        self.assertEqual(summary['best'], {'stage': 1, 'epoch': 5})
        self.assertEqual(summary['stage1']['stop_epoch'], 15)
        self.assertEqual(summary['stage1']['reason'], 'patience')
        self.assertEqual(len(summary['smoothed']['1']), 30)
        self.assertEqual(FileTools.load_yaml(self.path('stop.yaml'))['best'], {'stage': 1, 'epoch': 5})

    def test_monitor_modes(self):
        trace = self.write_trace('quirk.jsonl', [1.0, 0.8, 0.805])
        best = {}
        for mode in ('paper-verbatim', 'conventional'):
            status, summary = self.snow('monitor', '--trace', trace, '--patience', '3', '--min-delta', '0.01',
                                        '--mode', mode)
            self.assertEqual(status, 0)
            best[mode] = summary['best']['epoch']
        self.assertEqual(best, {'paper-verbatim': 2, 'conventional': 1})

    def test_monitor_two_stages(self):
        utilities.write_trace(self.path('two.jsonl'), LossTrace([1.0, 0.8, 0.6, 0.5], 1),
                              LossTrace([0.6, 0.7, 0.8], 2))
        status, summary = self.snow('monitor', '--trace', self.path('two.jsonl'), '--patience', '3',
                                    '--min-delta', '0.01')
        self.assertEqual(status, 0)
        self.assertEqual(summary['best'], {'stage': 1, 'epoch': 3})
        self.assertEqual(summary['stage2']['stop_epoch'], 2)

    def test_monitor_bad_trace(self):
        open(self.path('empty.jsonl'), 'w').close()
        self.assertEqual(self.snow('monitor', '--trace', self.path('empty.jsonl'))[0], 2)
        trace = self.write_trace('short.jsonl', [1.0, 0.9])
        self.assertEqual(self.snow('monitor', '--trace', trace, '--smooth-window', '4')[0], 1)
        self.assertEqual(self.snow('monitor', '--trace', trace, '--patience', '0')[0], 1)

    # ------------------------------------- tile -------------------------------------
    def test_tile(self):
        slide = self.path('slide', 'manifest.yaml')
        FileTools.save_dataset(Dataset('slide', CLASS_NAMES, [make_nuclei_image('s', 512, 512, seed=4)]), slide)
        for overlap, expected in (('0', 4), ('128', 9)):
            out = self.path('tiles' + overlap, 'manifest.yaml')
            status, summary = self.snow('tile', '--input', slide, '--size', '256', '--overlap', overlap,
                                        '--output', out)
            self.assertEqual(status, 0)
            self.assertEqual(summary['tiles'], expected)
            tiles = FileTools.load_dataset(out)
            self.assertEqual(len(tiles.images), expected)
            with open(summary['weights']) as f:
                self.assertEqual(len(f.read().splitlines()), expected + 1)

        status, _ = self.snow('tile', '--input', slide, '--size', '256', '--overlap', '256',
                              '--output', self.path('tiles256', 'manifest.yaml'))
        self.assertEqual(status, 1)

    def test_config_file(self):
        FileTools.save_yaml(self.dir, 'snow.yaml', {'path_params': {'input_manifest': self.gt},
                                                    'tile_params': {'size': 48}})
        status, summary = self.snow('tile', '--config', self.path('snow.yaml'),
                                    '--output', self.path('tiles', 'manifest.yaml'))
        self.assertEqual(status, 0)
        self.assertEqual(summary['tiles'], 8)
        FileTools.save_yaml(self.dir, 'bad.yaml', {'control_params': {}})
        self.assertEqual(self.snow('tile', '--config', self.path('bad.yaml'))[0], 1)


if __name__ == '__main__':
    unittest.main()
