'''
----------- Example_02 --------------
Score predictions against the ground truth
-------------------------------------

In this example:
  - Treat a corrupted copy of a toy dataset as model predictions
  - Match instances and compute detection, segmentation and classification metrics
  - Write the yaml, csv and text reports
  - Print the normalised confusion matrix
'''
# Python modules
import os
# SNOW toolbox modules
from SNOW_toolbox import toy_data
from SNOW_toolbox.annotations import NoiseSpec, PredictedImage, SegmentationNoise
from SNOW_toolbox.corruption import apply_noise_pipeline
from SNOW_toolbox.evaluation import evaluate_dataset
from SNOW_toolbox.utilities import report_text, report_to_dict, write_report

this_dir = os.path.dirname(os.path.abspath(__file__))
example_out_dir = os.path.join(this_dir, 'examples_out')

gt = toy_data.make_toy_dataset(n_images=3, width=128, height=128, seed=5)

# A "model" that misses 10% of the nuclei, mislabels 15% and draws rough contours
spec = NoiseSpec(detection_rho=0.1, classification_rho=0.15,
                 segmentation=SegmentationNoise(epsilon_px=1.5, merge_enabled=False), seed=7)
noisy, _ = apply_noise_pipeline(gt, spec)
pred = noisy.replace(name='predictions',
                     images=[PredictedImage(img.image_id, img.instance_map, img.classes) for img in noisy.images])

report = evaluate_dataset(gt, pred, criterion='coverage', threshold=0.5, attribution='predicted')
det = report.detection['overall']
print('Detection: P {:.1f}  R {:.1f}  F1 {:.1f}'.format(det['precision'], det['recall'], det['f1']))
print('Balanced accuracy: {:.1f}'.format(report.classification['balanced_accuracy']))

paths = write_report(report, os.path.join(example_out_dir, '02_report'))
print('Wrote', ', '.join(os.path.basename(p) for p in paths))

_, ncm = report.confusion.frames(report.class_names)
print(ncm.round(1))
print(report_text(report_to_dict(report)))
