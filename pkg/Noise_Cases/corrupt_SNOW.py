# Annotation Corruption Script for a nuclei dataset
#  -- Made to run the tools distributed as a part of the SNOW_toolbox
import os

#-------------------------------- LOAD INPUT PARAMETERS ---------------------------------#
# Change this for your noise case
this_dir            = os.path.dirname(os.path.abspath(__file__))
parameter_filename  = os.path.join(this_dir,'combined_40_30.yaml')                  # Name of .yaml input file for the noise case




#--------------------------------------------------------------------------------------------------------------------------------------------------------------------------------#
#--------------------- NOTHING SHOULD NEED TO CHANGE AFTER THIS -----------------------------------------------------------------------------------------------------------------#
#--------------------------------------------------------------------------------------------------------------------------------------------------------------------------------#


#------------------------------------- INITIALIZATION ----------------------------------#
# Import SNOW_toolbox modules
from SNOW_toolbox import toy_data
from SNOW_toolbox.annotations import NoiseSpec
from SNOW_toolbox.corruption import apply_noise_pipeline
from SNOW_toolbox.ioTools import FileTools
from SNOW_toolbox.utilities import write_log

# Load input file contents, put them in some dictionaries to keep things cleaner
inps = FileTools.load_config(parameter_filename)
path_params = inps['path_params']
noise_params = inps['noise_params']
input_manifest = os.path.join(this_dir, path_params['input_manifest'])
output_manifest = os.path.join(this_dir, path_params['output_manifest'])

#---------------------------------- DO THE FUN STUFF ------------------------------------#
# Without a dataset of your own, start from the synthetic one
if not os.path.isfile(input_manifest):
    FileTools.save_dataset(toy_data.make_toy_dataset(n_images=4, width=256, height=256), input_manifest)

dataset = FileTools.load_dataset(input_manifest)
spec = NoiseSpec.from_dict(noise_params)
noisy, log = apply_noise_pipeline(dataset, spec)

# Write the noisy dataset and its corruption log
FileTools.save_dataset(noisy, output_manifest)
write_log(os.path.join(os.path.dirname(output_manifest), 'corruption_log.jsonl'), log)

summary = log.summary()
print('{}: {} nuclei'.format(dataset.name, dataset.n_instances()))
print('Removed {removed}, relabelled {relabelled}, distorted {distorted}, merged {merged}'.format(**summary))
