'''
----------- Example_01 --------------
Build a toy dataset and corrupt its annotations
-------------------------------------

In this example:
  - Generate a synthetic nuclei dataset
  - Inject detection, classification and segmentation noise
  - Summarize the corruption log
  - Save the noisy dataset and its log
  - Plot clean and noisy instance maps side by side
'''
# Python modules
import os
import matplotlib.pyplot as plt
import numpy as np
# SNOW toolbox modules
from SNOW_toolbox import toy_data
from SNOW_toolbox.annotations import NoiseSpec, SegmentationNoise
from SNOW_toolbox.corruption import apply_noise_pipeline
from SNOW_toolbox.ioTools import FileTools
from SNOW_toolbox.utilities import write_log

this_dir = os.path.dirname(os.path.abspath(__file__))
example_out_dir = os.path.join(this_dir, 'examples_out')
if not os.path.isdir(example_out_dir):
  os.makedirs(example_out_dir)

# Clean ground truth
clean = toy_data.make_toy_dataset(n_images=2, width=160, height=160, seed=11)
print('Clean dataset: {} nuclei, per class {}'.format(clean.n_instances(), clean.class_counts()))

# Noise settings, applied in the order detection, segmentation, classification
spec = NoiseSpec(detection_rho=0.2,
                 classification_rho=0.3,
                 segmentation=SegmentationNoise(epsilon_px=2.0, merge_enabled=True),
                 seed=2021)
noisy, log = apply_noise_pipeline(clean, spec)

summary = log.summary()
print('Removed {removed}, relabelled {relabelled}, distorted {distorted}, merged {merged}'.format(**summary))
print('Merge fraction per class:', summary['merge_fraction'])

# Save
written = FileTools.save_dataset(noisy, os.path.join(example_out_dir, '01_noisy', 'manifest.yaml'))
write_log(os.path.join(example_out_dir, '01_noisy', 'corruption_log.jsonl'), log)
print('Wrote {} files'.format(len(written)))

# Plot the first image before and after
def colour_ids(instance_map):
  # random colours per instance id, black background
  rng = np.random.default_rng(0)
  palette = rng.uniform(0.2, 1.0, size=(int(instance_map.max()) + 1, 3))
  palette[0] = 0.0
  return palette[instance_map]

fig, ax = plt.subplots(1, 2, constrained_layout=True)
ax[0].imshow(colour_ids(clean.images[0].instance_map))
ax[0].set_title('Clean')
ax[1].imshow(colour_ids(noisy.images[0].instance_map))
ax[1].set_title('Noisy')
for a in ax:
  a.axis('off')

if False:
  plt.show()
else:
  plt.savefig(os.path.join(example_out_dir, '01_NoisyAnnotations.png'))
