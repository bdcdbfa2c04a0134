'''
Noise injection: detection, segmentation, classification and their composition
'''
import unittest

import numpy as np

from SNOW_toolbox import corruption, geometry
from SNOW_toolbox.annotations import (AnnotatedImage, Dataset, InvalidClassCountError, InvalidRhoError, NoiseSpec,
                                      SegmentationNoise)
from SNOW_toolbox.toy_data import make_count_dataset, make_toy_dataset, three_nuclei_image

# per-class instance counts of a 27501-nucleus training set
TRAIN_COUNTS = {1: 13554, 2: 13385, 3: 562}


def single_instance_image(mask, class_id=1):
    return AnnotatedImage('one', mask.astype(np.uint32), {1: class_id})


class TestDetectionNoise(unittest.TestCase):

    def test_zero_rho_is_identity(self):
        dataset = make_toy_dataset(2, 64, 64)
        noisy, log = corruption.apply_detection_noise(dataset, 0.0, seed=1)
        self.assertIs(noisy, dataset)
        self.assertEqual(len(log), 0)

    def test_rounded_count(self):
        dataset = make_count_dataset({1: 100, 2: 100, 3: 563}, 60, 60)
        noisy, log = corruption.apply_detection_noise(dataset, 0.4, seed=5)
        removed = [r for r in log.events('remove') if r['class_id'] == 3]
        self.assertEqual(len(removed), 225)
        self.assertEqual(noisy.class_counts(), {1: 60, 2: 60, 3: 338})

    def test_removed_become_background(self):
        dataset = make_toy_dataset(2, 64, 64)
        noisy, log = corruption.apply_detection_noise(dataset, 0.5, seed=2)
        for rec in log.events('remove'):
            img = noisy.image(rec['image_id'])
            self.assertNotIn(rec['instance_id'], img.classes)
            self.assertFalse(np.any(img.instance_map == rec['instance_id']))
        for clean, dirty in zip(dataset.images, noisy.images):
            kept = dirty.instance_map != 0
            np.testing.assert_array_equal(dirty.instance_map[kept], clean.instance_map[kept])

    def test_invalid_rho(self):
        with self.assertRaises(InvalidRhoError):
            corruption.apply_detection_noise(make_toy_dataset(1, 32, 32), 1.0, seed=0)

    def test_transition_matrix(self):
        np.testing.assert_allclose(corruption.detection_transition_matrix(0.4), [[1.0, 0.4], [0.0, 0.6]])
        dataset = make_count_dataset({1: 100, 2: 100, 3: 563}, 60, 60)
        _, log = corruption.apply_detection_noise(dataset, 0.4, seed=5)
        realised = corruption.empirical_detection_matrix(log)
        np.testing.assert_allclose(realised[3], [[1.0, 225 / 563], [0.0, 338 / 563]])
        np.testing.assert_allclose(realised[1], corruption.detection_transition_matrix(0.4))


class TestClassificationNoise(unittest.TestCase):

    def test_zero_rho_is_identity(self):
        dataset = make_toy_dataset(2, 64, 64)
        noisy, log = corruption.apply_classification_noise(dataset, 0.0, seed=1)
        self.assertIs(noisy, dataset)
        self.assertEqual(len(log), 0)

    def test_geometry_untouched(self):
        dataset = make_toy_dataset(3, 64, 64)
        noisy, log = corruption.apply_classification_noise(dataset, 0.3, seed=4)
        self.assertGreater(len(log.events('relabel')), 0)
        for clean, dirty in zip(dataset.images, noisy.images):
            np.testing.assert_array_equal(clean.instance_map, dirty.instance_map)
        for rec in log.events('relabel'):
            self.assertNotEqual(rec['old_class'], rec['new_class'])
            self.assertEqual(noisy.image(rec['image_id']).classes[rec['instance_id']], rec['new_class'])

    def test_counts_per_class(self):
        dataset = make_count_dataset({1: 50, 2: 33, 3: 7}, 40, 40)
        _, log = corruption.apply_classification_noise(dataset, 0.3, seed=9)
        per_class = {}
        for rec in log.events('relabel'):
            per_class[rec['old_class']] = per_class.get(rec['old_class'], 0) + 1
        self.assertEqual(per_class, {1: 15, 2: 10, 3: 2})

    def test_needs_two_classes(self):
        dataset = Dataset('single', ('E',), [single_instance_image(np.ones((2, 2)))])
        with self.assertRaises(InvalidClassCountError):
            corruption.apply_classification_noise(dataset, 0.3, seed=0)

    def test_transition_matrix(self):
        Q = corruption.classification_transition_matrix(0.3, 3)
        np.testing.assert_allclose(np.diag(Q), [0.7, 0.7, 0.7])
        np.testing.assert_allclose(Q.sum(axis=0), 1.0)
        self.assertAlmostEqual(Q[0, 1], 0.15)

    def test_empirical_matrix(self):
        dataset = make_count_dataset({1: 500, 2: 500, 3: 500}, 60, 60)
        _, log = corruption.apply_classification_noise(dataset, 0.3, seed=3)
        realised = corruption.empirical_classification_matrix(log, 3)
        np.testing.assert_allclose(realised.sum(axis=0), 1.0)
        np.testing.assert_allclose(np.diag(realised), 0.7)
        # off-diagonal entries are binomial draws around rho / (K - 1)
        off = realised[~np.eye(3, dtype=bool)]
        self.assertTrue(np.all(np.abs(off - 0.15) < 0.06))


class TestSegmentationNoise(unittest.TestCase):

    def test_disk_distortion(self):
        yy, xx = np.mgrid[0:33, 0:33]
        disk = (xx - 16) ** 2 + (yy - 16) ** 2 <= 64
        distorted, records = corruption.distort_contours(single_instance_image(disk), epsilon_px=2.0,
                                                         ellipse_scale=1.0, seed=0)
        self.assertEqual(len(records), 1)
        self.assertLessEqual(records[0]['n_vertices'], 12)
        self.assertFalse(records[0]['fallback'])
        self.assertGreaterEqual(geometry.iou(disk, distorted.instance_map == 1), 0.7)
        self.assertEqual(distorted.classes, {1: 1})

    def test_ellipse_round_trip(self):
        polygon = geometry.sample_ellipse(geometry.EllipseParams(20, 20, 12, 8, 0.3), 256)
        mask = geometry.rasterize_polygon(polygon, 40, 40)
        distorted, _ = corruption.distort_contours(single_instance_image(mask), epsilon_px=0.0,
                                                   ellipse_scale=1.0, ellipse_samples=64)
        self.assertGreaterEqual(geometry.iou(mask, distorted.instance_map == 1), 0.9)

    def test_scale_grows_the_instance(self):
        yy, xx = np.mgrid[0:40, 0:40]
        disk = (xx - 20) ** 2 + (yy - 20) ** 2 <= 36
        _, records = corruption.distort_contours(single_instance_image(disk), epsilon_px=0.5, ellipse_scale=1.5)
        self.assertGreater(records[0]['area_after'], 1.8 * records[0]['area_before'])

    def test_degenerate_fit_falls_back(self):
        mask = np.zeros((9, 9), dtype=bool)
        mask[4, 3:6] = True
        distorted, records = corruption.distort_contours(single_instance_image(mask))
        self.assertTrue(records[0]['fallback'])
        self.assertGreater((distorted.instance_map == 1).sum(), 0)

    def test_foreign_pixels_never_taken(self):
        image = three_nuclei_image()
        distorted, _ = corruption.distort_contours(image, epsilon_px=2.0, ellipse_scale=1.5, seed=1)
        for inst in (1, 2, 3):
            grown = distorted.instance_map == inst
            self.assertTrue(np.all(np.isin(image.instance_map[grown], (0, inst))))

    def test_no_touching_pairs(self):
        image = AnnotatedImage('apart', [[1, 0, 2], [1, 0, 2]], {1: 1, 2: 1})
        merged, merge_log = corruption.merge_adjacent(image, smooth_radius_px=3.0)
        self.assertEqual(merged, image)
        self.assertEqual(merge_log, [])

    def test_merge_chain(self):
        m = np.zeros((12, 16), dtype=np.uint32)
        m[0:10, 0:5] = 1
        m[0:10, 5:10] = 2
        m[0:6, 10:15] = 3
        image = AnnotatedImage('chain', m, {1: 1, 2: 1, 3: 1})
        self.assertEqual(geometry.border_counts(m), {(1, 2): 10, (2, 3): 6})

        merged, merge_log = corruption.merge_adjacent(image, smooth_radius_px=0.0)
        self.assertEqual([(r['kept'], r['absorbed'], r['border']) for r in merge_log], [(1, 2, 10)])
        self.assertEqual(merged.classes, {1: 1, 3: 1})
        np.testing.assert_array_equal(merged.instance_map == 1, (m == 1) | (m == 2))
        np.testing.assert_array_equal(merged.instance_map == 3, m == 3)

    def test_merge_closing_keeps_other_instances(self):
        m = np.zeros((20, 20), dtype=np.uint32)
        m[2:8, 2:6] = 1
        m[2:5, 6:10] = 2
        m[5:8, 6:10] = 3
        image = AnnotatedImage('close', m, {1: 1, 2: 1, 3: 2})
        merged, merge_log = corruption.merge_adjacent(image, smooth_radius_px=3.0)
        self.assertEqual(len(merge_log), 1)
        np.testing.assert_array_equal(merged.instance_map == 3, m == 3)
        self.assertTrue(np.all((merged.instance_map == 1) >= ((m == 1) | (m == 2))))

    def test_different_classes_never_merge(self):
        image = AnnotatedImage('mixed', [[1, 1, 2, 2]], {1: 1, 2: 2})
        _, merge_log = corruption.merge_adjacent(image)
        self.assertEqual(merge_log, [])

    def test_three_nuclei(self):
        dataset = Dataset('three', ('E', 'L'), [three_nuclei_image()])
        noisy, log = corruption.apply_segmentation_noise(dataset, SegmentationNoise(epsilon_px=2.0), seed=7)
        self.assertEqual(len(log.events('distort')), 3)
        merges = log.events('merge')
        self.assertEqual([(r['kept'], r['absorbed']) for r in merges], [(1, 2)])
        self.assertEqual(noisy.images[0].classes, {1: 1, 3: 2})
        self.assertEqual(log.summary()['merge_fraction'], {1: 1.0, 2: 0.0})


class TestPipeline(unittest.TestCase):

    def test_identity_spec(self):
        dataset = make_toy_dataset(2, 64, 64)
        noisy, log = corruption.apply_noise_pipeline(dataset, NoiseSpec())
        self.assertEqual(noisy, dataset)
        self.assertEqual(len(log), 0)

    def test_training_set_counts(self):
        dataset = make_count_dataset(TRAIN_COUNTS)
        self.assertEqual(dataset.n_instances(), 27501)
        spec = NoiseSpec(detection_rho=0.4, classification_rho=0.3, seed=7)
        noisy, log = corruption.apply_noise_pipeline(dataset, spec)

        removed = len(log.events('remove'))
        relabelled = len(log.events('relabel'))
        unchanged = noisy.n_instances() - relabelled
        self.assertAlmostEqual(removed, 11000, delta=3)
        self.assertAlmostEqual(relabelled, 4950, delta=3)
        self.assertAlmostEqual(unchanged, 11551, delta=3)
        self.assertEqual(removed + relabelled + unchanged, 27501)

        # classification percentages apply to the surviving instances
        populations = {r['class_id']: r['n'] for r in log.events('population', 'classification')}
        self.assertEqual(populations, {1: 13554 - 5422, 2: 13385 - 5354, 3: 562 - 225})

    def test_deterministic(self):
        dataset = make_toy_dataset(2, 96, 96)
        spec = NoiseSpec(detection_rho=0.2, classification_rho=0.3,
                         segmentation=SegmentationNoise(epsilon_px=1.5), seed=42)
        first, log1 = corruption.apply_noise_pipeline(dataset, spec)
        second, log2 = corruption.apply_noise_pipeline(dataset, spec, processes=2)
        self.assertEqual(first, second)
        self.assertEqual(log1, log2)
        other, _ = corruption.apply_noise_pipeline(dataset, NoiseSpec(detection_rho=0.2, seed=43))
        self.assertNotEqual(other, first)

    def test_provenance(self):
        dataset = make_toy_dataset(1, 64, 64)
        spec = NoiseSpec(detection_rho=0.2, seed=3)
        noisy, log = corruption.apply_noise_pipeline(dataset, spec)
        self.assertEqual(noisy.provenance['noise_spec'], spec.to_dict())
        self.assertEqual(log.noise_spec, spec.to_dict())

    def test_replay(self):
        dataset = make_toy_dataset(2, 96, 96, seed=5)
        spec = NoiseSpec(detection_rho=0.25, classification_rho=0.2,
                         segmentation=SegmentationNoise(epsilon_px=2.0, smooth_radius_px=2.0), seed=11)
        noisy, log = corruption.apply_noise_pipeline(dataset, spec)
        self.assertEqual(corruption.replay_log(dataset, log), noisy)

    def test_seed_derivation(self):
        self.assertEqual(corruption.derive_seed(7, 'detection', 1), corruption.derive_seed(7, 'detection', 1))
        self.assertNotEqual(corruption.derive_seed(7, 'detection', 1), corruption.derive_seed(7, 'classification', 1))
        self.assertEqual(corruption.round_half_up(0.5, 5), 3)
        self.assertEqual(corruption.round_half_up(0.4, 563), 225)


if __name__ == '__main__':
    unittest.main()
