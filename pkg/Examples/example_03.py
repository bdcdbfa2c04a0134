'''
----------- Example_03 --------------
Early stopping on a validation loss trace
-------------------------------------

In this example:
  - Simulate a noisy validation loss of a two-stage training run
  - Run the patience rule in both stopping modes
  - Run the two-stage schedule
  - Plot the raw and Savitzky-Golay smoothed losses with the best epochs
'''
# Python modules
import os
import matplotlib.pyplot as plt
import numpy as np
# SNOW toolbox modules
from SNOW_toolbox.stopping import LossTrace, StopPolicy, TwoStageSchedule, run_early_stop, savgol_smooth, two_stage_run

this_dir = os.path.dirname(os.path.abspath(__file__))
example_out_dir = os.path.join(this_dir, 'examples_out')
if not os.path.isdir(example_out_dir):
  os.makedirs(example_out_dir)

# Decaying loss with an overfitting upturn and some jitter
rng = np.random.default_rng(3)
epochs = np.arange(50)
stage1 = LossTrace(0.9 * np.exp(-epochs / 8.0) + 0.15 + 0.002 * epochs + rng.normal(0, 0.01, epochs.size), 1)
stage2 = LossTrace(0.2 * np.exp(-epochs / 5.0) + 0.13 + 0.003 * epochs + rng.normal(0, 0.008, epochs.size), 2)

for mode in ('paper-verbatim', 'conventional'):
  policy = StopPolicy(patience=10, min_delta=0.001, mode=mode)
  best, stop, state = run_early_stop(stage1, policy)
  print('{:>15s}: best epoch {}, stopped after epoch {}'.format(mode, best, stop))

schedule = TwoStageSchedule(stage1=StopPolicy(patience=10, min_delta=0.001),
                            stage2=StopPolicy(patience=5, min_delta=0.001))
result = two_stage_run(stage1, stage2, schedule)
print('Two stages: best stage {stage}, epoch {epoch}'.format(**result['best']))

# Plot
smooth1, smooth2 = savgol_smooth(stage1, window=11, order=4), savgol_smooth(stage2, window=11, order=4)
n1 = result['stage1']['stop_epoch'] + 1
n2 = result['stage2']['stop_epoch'] + 1 if result['stage2'] else 0
fig, ax = plt.subplots(constrained_layout=True)
ax.plot(np.arange(n1), stage1.losses[:n1], '.', color='C0', label='stage 1')
ax.plot(np.arange(n1), smooth1.losses[:n1], color='C0')
ax.plot(n1 + np.arange(n2), stage2.losses[:n2], '.', color='C1', label='stage 2')
ax.plot(n1 + np.arange(n2), smooth2.losses[:n2], color='C1')
best_stage, best_epoch = result['best']['stage'], result['best']['epoch']
ax.axvline(best_epoch + (n1 if best_stage == 2 else 0), color='k', linestyle='--', label='best checkpoint')
ax.set_xlabel('Epoch')
ax.set_ylabel('Validation loss')
ax.legend()

if False:
  plt.show()
else:
  plt.savefig(os.path.join(example_out_dir, '03_EarlyStopping.png'))
