'''
Files and tiles: mask containers, loss traces, corruption logs, manifests, tiling,
sampling weights and metric reports
'''
import filecmp
import os
import tempfile
import unittest
import zlib

import numpy as np

from SNOW_toolbox import tiling, utilities
from SNOW_toolbox.annotations import (OTHER, AnnotatedImage, ConfigError, CorruptFileError, DataError, Dataset,
                                      EmptyTraceError, InconsistentPlanesError, InvalidAnnotationError,
                                      InvalidGeometryError, MissingFileError, NoiseSpec, PredictedImage, SegmentationNoise,
                                      VersionUnsupportedError)
from SNOW_toolbox.corruption import apply_noise_pipeline
from SNOW_toolbox.evaluation import evaluate_dataset
from SNOW_toolbox.ioTools import FileTools
from SNOW_toolbox.stopping import LossTrace
from SNOW_toolbox.toy_data import make_nuclei_image, make_toy_dataset


def resealed(data):
    '''Container bytes with a valid checksum after an edit'''
    body = data[:-utilities.CRC.size]
    return body + utilities.CRC.pack(zlib.crc32(body))


class TempDirTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.dir, *parts)


class TestContainers(TempDirTestCase):

    def setUp(self):
        super().setUp()
        self.image = make_nuclei_image('img', 40, 30, seed=3)
        self.file = self.path('img.snwb')
        utilities.write_container(self.file, self.image)

    def rewrite(self, data):
        with open(self.file, 'wb') as f:
            f.write(data)

    def test_round_trip(self):
        self.assertEqual(utilities.read_container(self.file), self.image)
        copy = utilities.read_container(self.file, 'renamed', {'patient': 'P1'})
        self.assertEqual(copy.image_id, 'renamed')
        self.assertEqual(copy.metadata, {'patient': 'P1'})

    def test_layout(self):
        data = utilities.container_bytes(self.image)
        self.assertEqual(data[:4], b'SNWB')
        self.assertEqual(len(data), utilities.HEADER.size + 6 * 40 * 30 + utilities.CRC.size)

    def test_flipped_byte(self):
        data = bytearray(utilities.container_bytes(self.image))
        data[utilities.HEADER.size + 17] ^= 0x01
        self.rewrite(bytes(data))
        with self.assertRaises(CorruptFileError):
            utilities.read_container(self.file)

    def test_truncated(self):
        self.rewrite(utilities.container_bytes(self.image)[:-10])
        with self.assertRaises(CorruptFileError):
            utilities.read_container(self.file)

    def test_inconsistent_planes(self):
        data = bytearray(utilities.container_bytes(self.image))
        ys, xs = np.nonzero(self.image.instance_map)
        pixel = int(ys[0]) * 40 + int(xs[0])
        offset = utilities.HEADER.size + 4 * 40 * 30 + 2 * pixel
        old = int.from_bytes(data[offset:offset + 2], 'little')
        data[offset:offset + 2] = (old % 3 + 1).to_bytes(2, 'little')
        self.rewrite(resealed(bytes(data)))
        with self.assertRaises(InconsistentPlanesError):
            utilities.read_container(self.file)

    def test_version(self):
        data = bytearray(utilities.container_bytes(self.image))
        data[4:6] = (2).to_bytes(2, 'little')
        self.rewrite(resealed(bytes(data)))
        with self.assertRaises(VersionUnsupportedError):
            utilities.read_container(self.file)

    def test_missing(self):
        with self.assertRaises(MissingFileError):
            utilities.read_container(self.path('nothing.snwb'))

    def test_other_class(self):
        pred = PredictedImage('p', [[1, 2], [0, 2]], {1: OTHER, 2: 1})
        utilities.write_container(self.file, pred)
        self.assertEqual(utilities.read_container(self.file, 'p', predicted=True), pred)
        with self.assertRaises(InconsistentPlanesError):
            utilities.read_container(self.file, 'p')


class TestTracesAndLogs(TempDirTestCase):

    def test_trace_round_trip(self):
        first, second = LossTrace([1.0, 0.7, 0.65], 1), LossTrace([0.6, 0.61], 2)
        utilities.write_trace(self.path('t.jsonl'), first, second)
        traces = utilities.read_trace(self.path('t.jsonl'))
        self.assertEqual(traces, {1: first, 2: second})

    def test_empty_trace(self):
        open(self.path('empty.jsonl'), 'w').close()
        with self.assertRaises(EmptyTraceError):
            utilities.read_trace(self.path('empty.jsonl'))

    def test_log_round_trip(self):
        spec = NoiseSpec(detection_rho=0.2, classification_rho=0.2,
                         segmentation=SegmentationNoise(epsilon_px=1.0), seed=5)
        _, log = apply_noise_pipeline(make_toy_dataset(1, 64, 64), spec)
        utilities.write_log(self.path('log.jsonl'), log)
        self.assertEqual(utilities.read_log(self.path('log.jsonl')), log)

    def test_bad_log(self):
        with open(self.path('log.jsonl'), 'w') as f:
            f.write('{"event": "remove"}\n')
        with self.assertRaises(CorruptFileError):
            utilities.read_log(self.path('log.jsonl'))


class TestManifests(TempDirTestCase):

    def test_dataset_round_trip(self):
        dataset = make_toy_dataset(2, 48, 48).replace(provenance={'source': 'toy'})
        written = FileTools.save_dataset(dataset, self.path('manifest.yaml'))
        self.assertEqual(written[-1], self.path('manifest.yaml'))
        self.assertTrue(all(os.path.isfile(p) for p in written))
        self.assertEqual(FileTools.load_dataset(self.path('manifest.yaml')), dataset)

    def test_predicted_dataset(self):
        pred = Dataset('pred', ('E',), [PredictedImage('a', [[1, 2]], {1: OTHER, 2: 1})])
        FileTools.save_dataset(pred, self.path('pred', 'manifest.yaml'))
        loaded = FileTools.load_dataset(self.path('pred', 'manifest.yaml'), predicted=True)
        self.assertIsInstance(loaded.images[0], PredictedImage)
        self.assertEqual(loaded, pred)

    def test_manifest_checks(self):
        FileTools.save_dataset(make_toy_dataset(1, 32, 32), self.path('manifest.yaml'))
        data = FileTools.load_yaml(self.path('manifest.yaml'))

        FileTools.save_yaml(self.dir, 'v2.yaml', {**data, 'schema_version': 2})
        with self.assertRaises(VersionUnsupportedError):
            FileTools.load_manifest(self.path('v2.yaml'))

        FileTools.save_yaml(self.dir, 'dup.yaml', {**data, 'images': data['images'] * 2})
        with self.assertRaises(DataError):
            FileTools.load_manifest(self.path('dup.yaml'))

        entry = dict(data['images'][0], container='masks/gone.snwb')
        FileTools.save_yaml(self.dir, 'gone.yaml', {**data, 'images': [entry]})
        with self.assertRaises(MissingFileError):
            FileTools.load_manifest(self.path('gone.yaml'))

        with self.assertRaises(MissingFileError):
            FileTools.load_manifest(self.path('nothing.yaml'))

    def test_entry_keys(self):
        FileTools.save_dataset(make_toy_dataset(1, 32, 32), self.path('manifest.yaml'))
        data = FileTools.load_yaml(self.path('manifest.yaml'))
        for key in ('container', 'image_id'):
            entry = {k: v for k, v in data['images'][0].items() if k != key}
            FileTools.save_yaml(self.dir, 'no_key.yaml', {**data, 'images': [entry]})
            with self.assertRaisesRegex(CorruptFileError, key):
                FileTools.load_manifest(self.path('no_key.yaml'))

    def test_class_beyond_manifest_classes(self):
        image = AnnotatedImage('a', [[1, 2], [0, 2]], {1: 1, 2: 4})
        FileTools.save_dataset(Dataset('four', ('E', 'L', 'N', 'X'), [image]), self.path('manifest.yaml'))
        data = FileTools.load_yaml(self.path('manifest.yaml'))
        FileTools.save_yaml(self.dir, 'manifest.yaml', {**data, 'classes': ['E', 'L', 'N']})
        with self.assertRaisesRegex(InvalidAnnotationError, 'class out of range'):
            FileTools.load_dataset(self.path('manifest.yaml'))

    def test_config_sections(self):
        FileTools.save_yaml(self.dir, 'cfg.yaml', {'noise_params': {'detection_rho': 0.4}})
        config = FileTools.load_config(self.path('cfg.yaml'))
        self.assertEqual(config['noise_params'], {'detection_rho': 0.4})
        self.assertEqual(config['stop_params'], {})
        FileTools.save_yaml(self.dir, 'bad.yaml', {'model_params': {}})
        with self.assertRaises(ConfigError):
            FileTools.load_config(self.path('bad.yaml'))

    def test_remove_numpy(self):
        clean = FileTools.remove_numpy({'a': np.float64(1.5), 'b': [np.int32(2), np.array([1, 2])], 'c': np.bool_(True)})
        self.assertEqual(clean, {'a': 1.5, 'b': [2, [1, 2]], 'c': True})
        self.assertIs(type(clean['a']), float)


class TestTiling(unittest.TestCase):

    def setUp(self):
        self.image = make_nuclei_image('slide', 512, 512, seed=1)

    def test_exact_grid(self):
        tiles = tiling.tile_image(self.image, 256, 0)
        self.assertEqual([t.origin for t in tiles.tiles], [(0, 0), (256, 0), (0, 256), (256, 256)])
        self.assertEqual(tiles.tiles[1].image.image_id, 'slide_x256_y0')

    def test_overlapping_grid(self):
        tiles = tiling.tile_image(self.image, 256, 128)
        self.assertEqual(len(tiles), 9)
        self.assertEqual(sorted({t.origin[0] for t in tiles.tiles}), [0, 128, 256])

    def test_clamped_origins(self):
        self.assertEqual(tiling.tile_origins(300, 256, 0), [0, 44])
        self.assertEqual(tiling.tile_origins(100, 256, 0), [0])
        small = make_nuclei_image('small', 300, 300, seed=2)
        tiles = tiling.tile_image(small, 256, 0)
        self.assertEqual(len(tiles), 4)
        self.assertTrue(all(t.image.instance_map.shape == (256, 256) for t in tiles.tiles))

    def test_invalid_geometry(self):
        for size, overlap in ((256, 256), (256, -1), (0, 0)):
            with self.assertRaises(InvalidGeometryError):
                tiling.tile_image(self.image, size, overlap)

    def test_remap(self):
        for tile in tiling.tile_image(self.image, 200, 50).tiles:
            x, y = tile.origin
            child = tile.image.instance_map
            self.assertEqual(list(tile.image.ids), list(range(1, len(tile.remap) + 1)))
            lut = np.zeros(len(tile.remap) + 1, dtype=np.uint32)
            for c, p in tile.remap.items():
                lut[c] = p
                self.assertEqual(tile.image.classes[c], self.image.classes[p])
            np.testing.assert_array_equal(lut[child], self.image.instance_map[y:y + child.shape[0],
                                                                               x:x + child.shape[1]])
            self.assertEqual(tile.image.metadata['parent_id'], 'slide')

    def test_stitch(self):
        for overlap in (0, 128):
            self.assertEqual(tiling.stitch_tiles(tiling.tile_image(self.image, 256, overlap)), self.image)

    def test_crossing_instances_are_kept(self):
        m = np.zeros((8, 8), dtype=np.uint32)
        m[2:6, 2:6] = 1
        tiles = tiling.tile_image(AnnotatedImage('x', m, {1: 1}), 4, 0)
        self.assertTrue(all(tile.remap == {1: 1} for tile in tiles.tiles))

    def test_tile_dataset(self):
        dataset = make_toy_dataset(2, 128, 128)
        tiled = tiling.tile_dataset(dataset, 64, 0)
        self.assertEqual(len(tiled.images), 8)
        self.assertEqual(tiled.class_names, dataset.class_names)


class TestSamplingWeights(unittest.TestCase):

    def tiles(self):
        a_only = AnnotatedImage('a', [[1, 0]], {1: 1})
        b_only = AnnotatedImage('b', [[1, 2]], {1: 2, 2: 2})
        both = AnnotatedImage('ab', [[1, 2]], {1: 1, 2: 2})
        empty = AnnotatedImage('e', [[0, 0]], {})
        return [a_only, b_only, both, empty]

    def test_rare_class_weighted_up(self):
        weights = tiling.sampling_weights(self.tiles(), {1: 90, 2: 10})
        self.assertAlmostEqual(weights[1] / weights[0], 9.0)
        self.assertAlmostEqual(weights[2], weights[1])
        self.assertAlmostEqual(weights.mean(), 1.0)

    def test_empty_tile(self):
        weights = tiling.sampling_weights(self.tiles(), {1: 90, 2: 10})
        self.assertGreater(weights[3], 0)
        self.assertAlmostEqual(weights[3], weights[:3].min())

    def test_single_class(self):
        images = [AnnotatedImage(str(k), [[1] * (k + 1)], {1: 1}) for k in range(3)]
        np.testing.assert_allclose(tiling.sampling_weights(images, {1: 3}), 1.0)

    def test_class_counts(self):
        self.assertEqual(tiling.class_counts(self.tiles(), K=3), {1: 2, 2: 3, 3: 0})


class TestReports(TempDirTestCase):

    def setUp(self):
        super().setUp()
        gt = make_toy_dataset(2, 96, 96)
        self.perfect = evaluate_dataset(gt, gt.replace(images=[PredictedImage(i.image_id, i.instance_map, i.classes)
                                                               for i in gt.images]))
        # class 2 never predicted
        gt_img = AnnotatedImage('a', [[1, 1, 0, 2, 2]] * 2, {1: 1, 2: 2})
        pred_img = PredictedImage('a', [[1, 1, 0, 0, 0]] * 2, {1: 1})
        self.partial = evaluate_dataset(Dataset('gt', ('E', 'L'), [gt_img]), Dataset('pred', ('E', 'L'), [pred_img]))

    def test_perfect(self):
        report = utilities.report_to_dict(self.perfect)
        self.assertEqual(report['detection']['overall']['precision'], 100.0)
        self.assertEqual(report['segmentation']['overall']['iou_mean'], 100.0)
        self.assertEqual(report['segmentation']['overall']['hd_mean'], 0.0)
        self.assertEqual(report['classification']['balanced_accuracy'], 100.0)
        self.assertEqual(report['confusion']['raw'][0][0], '-')

    def test_undefined_cells(self):
        report = utilities.report_to_dict(self.partial)
        self.assertEqual(report['detection']['per_class']['L']['precision'], '-')
        self.assertEqual(report['detection']['per_class']['L']['recall'], 0.0)
        self.assertEqual(report['classification']['per_class']['L']['recall'], '-')
        self.assertEqual(report['confusion']['ncm'][1], ['-', '-', '-'])

        paths = utilities.write_report(self.partial, self.dir, formats=['csv'])
        with open(paths[0]) as f:
            rows = f.read().splitlines()
        self.assertEqual(rows[0], 'task,class,metric,value')
        self.assertIn('detection,L,precision,-', rows)

    def test_deterministic(self):
        first = utilities.write_report(self.perfect, self.path('one'))
        second = utilities.write_report(self.perfect, self.path('two'))
        self.assertEqual([os.path.basename(p) for p in first], ['metrics.yaml', 'metrics.csv', 'metrics.txt'])
        for a, b in zip(first, second):
            self.assertTrue(filecmp.cmp(a, b, shallow=False))

    def test_read_back(self):
        paths = utilities.write_report(self.partial, self.dir, formats=['yaml'])
        self.assertEqual(utilities.read_report(paths[0]), utilities.report_to_dict(self.partial))
        text_paths = utilities.write_report(utilities.read_report(paths[0]), self.dir, formats=['txt'])
        with open(text_paths[0]) as f:
            self.assertIn('balanced accuracy', f.read())

    def test_unknown_format(self):
        with self.assertRaises(ConfigError):
            utilities.write_report(self.perfect, self.dir, formats=['xlsx'])


if __name__ == '__main__':
    unittest.main()
