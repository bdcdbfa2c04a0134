'''
----------- Example_04 --------------
Run a noise experiment from a yaml file
-------------------------------------

In this example:
  - Read a .yaml file
  - Tile a dataset and compute class-balancing sampling weights
  - Corrupt the tiles with the configured noise
  - Evaluate the noisy tiles against the clean ones
  - Write the report
'''
# Python modules
import os
import pandas as pd
# SNOW toolbox modules
from SNOW_toolbox import toy_data
from SNOW_toolbox.annotations import NoiseSpec, PredictedImage
from SNOW_toolbox.corruption import apply_noise_pipeline
from SNOW_toolbox.evaluation import evaluate_dataset
from SNOW_toolbox.ioTools import FileTools
from SNOW_toolbox.tiling import sampling_weights, tile_dataset
from SNOW_toolbox.utilities import write_report

# Load yaml file
this_dir = os.path.dirname(os.path.abspath(__file__))
parameter_filename = os.path.join(this_dir, 'SNOW_example.yaml')
inps = FileTools.load_config(parameter_filename)
path_params = inps['path_params']
noise_params = inps['noise_params']
eval_params = inps['eval_params']
tile_params = inps['tile_params']
out_dir = os.path.join(this_dir, path_params['output_dir'])
if not os.path.isdir(out_dir):
  os.makedirs(out_dir)

# Tile the slides
slides = toy_data.make_toy_dataset(n_images=2, width=300, height=300, seed=1)
tiles = tile_dataset(slides, tile_params['size'], tile_params['overlap'])
weights = sampling_weights(tiles.images, slides.class_counts())
pd.DataFrame({'image_id': [t.image_id for t in tiles.images], 'weight': weights}).to_csv(
  os.path.join(out_dir, '04_sampling_weights.csv'), index=False)
print('{} tiles, weights from {:.2f} to {:.2f}'.format(len(tiles.images), weights.min(), weights.max()))

# Corrupt and score
spec = NoiseSpec.from_dict(noise_params)
noisy, log = apply_noise_pipeline(tiles, spec)
pred = noisy.replace(images=[PredictedImage(i.image_id, i.instance_map, i.classes) for i in noisy.images])
report = evaluate_dataset(tiles, pred,
                          criterion=eval_params['overseg_criterion'],
                          threshold=eval_params['overseg_threshold'],
                          attribution=eval_params['precision_attribution'])
paths = write_report(report, os.path.join(out_dir, '04_report'))
print('Detection F1 {:.1f}, balanced accuracy {:.1f}'.format(report.detection['overall']['f1'],
                                                              report.classification['balanced_accuracy']))
