# Copyright 2021 SNOW toolbox developers

# Licensed under the Apache License, Version 2.0 (the "License"); you may not use
# this file except in compliance with the License. You may obtain a copy of the
# License at http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software distributed
# under the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR
# CONDITIONS OF ANY KIND, either express or implied. See the License for the
# specific language governing permissions and limitations under the License.
"""
Patience-based early stopping of a two-stage training session, driven by one loss
value per epoch. The trainer owns the weights; this module only names the best epoch.

Two improvement rules are available:
    'paper-verbatim'    l_e < l_min + min_delta, and l_min follows l_e on every
                        improvement, so it may drift upward by less than min_delta
    'conventional'      l_e < l_min - min_delta
In both modes the epoch counter advances on every observation, and a session stops
when the no-improvement counter reaches the patience or the last epoch of the
budget has been observed.

Classes:
--------
StopPolicy
SessionState
Decision
LossTrace
TwoStageSchedule
EarlyStopMonitor

Functions:
----------
observe
run_early_stop
two_stage_run
savgol_smooth
follow_trace
"""
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import savgol_filter

from SNOW_toolbox.annotations import (ConfigError, EmptyTraceError, InvalidWindowError,
                                      MalformedTraceError, ObserveAfterStopError)

logger = logging.getLogger(__name__)

MODES = ('paper-verbatim', 'conventional')


@dataclass(frozen=True)
class StopPolicy():
    '''
    patience: int
        Consecutive non-improving epochs tolerated, >= 1
    min_delta: float
        Loss variation defining an improvement, >= 0
    max_epochs: int
        Epoch budget N, >= 1
    mode: str
        'paper-verbatim' or 'conventional'
    '''
    patience: int = 10
    min_delta: float = 0.001
    max_epochs: int = 50
    mode: str = 'paper-verbatim'

    def __post_init__(self):
        if int(self.patience) != self.patience or self.patience < 1:
            raise ConfigError('patience must be an integer >= 1, got {}'.format(self.patience), parameter='patience')
        if not self.min_delta >= 0:
            raise ConfigError('min_delta must be >= 0, got {}'.format(self.min_delta), parameter='min_delta')
        if int(self.max_epochs) != self.max_epochs or self.max_epochs < 1:
            raise ConfigError('max_epochs must be an integer >= 1, got {}'.format(self.max_epochs),
                              parameter='max_epochs')
        if self.mode not in MODES:
            raise ConfigError('mode must be one of {}, got {!r}'.format(MODES, self.mode), parameter='mode')

    @classmethod
    def from_dict(cls, stop_params):
        '''Build a policy from a stop_params dictionary, missing entries take the defaults'''
        known = {'patience', 'min_delta', 'max_epochs', 'mode'}
        unknown = set(stop_params) - known
        if unknown:
            raise ConfigError('Unknown stop parameter(s): {}'.format(', '.join(sorted(unknown))),
                              parameter=sorted(unknown)[0])
        return cls(**stop_params)

    def to_dict(self):
        return {'patience': self.patience, 'min_delta': self.min_delta,
                'max_epochs': self.max_epochs, 'mode': self.mode}


@dataclass(frozen=True)
class Decision():
    stop: bool
    epoch: int
    best_epoch: int
    reason: str = None      # 'patience' or 'budget' when stop is set

    def to_dict(self):
        return {'epoch': self.epoch, 'decision': 'stop' if self.stop else 'continue',
                'best_epoch': self.best_epoch, 'reason': self.reason}


@dataclass(frozen=True)
class SessionState():
    '''
    counter: consecutive non-improving epochs
    epoch: index of the next epoch to observe
    best_epoch: -1 before the first improvement
    l_min: reference loss of the improvement test
    '''
    counter: int = 0
    epoch: int = 0
    best_epoch: int = -1
    l_min: float = math.inf
    finished: bool = False
    history: tuple = ()


def _improves(loss, l_min, policy):
    if policy.mode == 'paper-verbatim':
        return loss < l_min + policy.min_delta
    return loss < l_min - policy.min_delta


def observe(state, policy, loss):
    '''
    Advance the session by one epoch

    Parameters:
    -----------
    state: SessionState
    policy: StopPolicy
    loss: float
        Loss of epoch state.epoch

    Returns:
    --------
    state: SessionState
        New state, the input is untouched
    decision: Decision
    '''
    if state.finished:
        raise ObserveAfterStopError('Session already stopped at epoch {} (best {})'.format(
            state.epoch - 1, state.best_epoch))
    loss = float(loss)
    e = state.epoch
    if _improves(loss, state.l_min, policy):
        counter, l_min, best = 0, loss, e
    else:
        counter, l_min, best = state.counter + 1, state.l_min, state.best_epoch

    reason = None
    if counter >= policy.patience:
        reason = 'patience'
    elif e >= policy.max_epochs - 1:
        reason = 'budget'
    decision = Decision(stop=reason is not None, epoch=e, best_epoch=best, reason=reason)
    new_state = SessionState(counter=counter, epoch=e + 1, best_epoch=best, l_min=l_min,
                             finished=decision.stop, history=state.history + (decision,))
    return new_state, decision


class EarlyStopMonitor():
    '''
    Stateful wrapper of observe for trainers that call back once per epoch

    Usage:
    ------
    monitor = EarlyStopMonitor(StopPolicy(patience=10))
    for epoch in range(N):
        ...
        if monitor.check(val_loss):
            break
    monitor.best_epoch
    '''

    def __init__(self, policy=None, state=None):
        self.policy = policy if policy is not None else StopPolicy()
        self.state = state if state is not None else SessionState()

    def check(self, loss):
        '''True when training should stop'''
        self.state, decision = observe(self.state, self.policy, loss)
        if decision.stop:
            logger.info('Stopping at epoch %d (%s), best epoch %d', decision.epoch, decision.reason,
                        decision.best_epoch)
        return decision.stop

    @property
    def best_epoch(self):
        return self.state.best_epoch

    @property
    def finished(self):
        return self.state.finished


# ----------------------------------- Loss traces -----------------------------------
@dataclass(frozen=True, eq=False)
class LossTrace():
    '''
    Losses of consecutive epochs starting at epoch 0

    losses: 1d float array
    stage: 1, 2 or None
    '''
    losses: np.ndarray
    stage: int = None

    def __post_init__(self):
        losses = np.array(self.losses, dtype=float).reshape(-1)
        losses.setflags(write=False)
        object.__setattr__(self, 'losses', losses)

    def __len__(self):
        return len(self.losses)

    def __eq__(self, other):
        if not isinstance(other, LossTrace):
            return NotImplemented
        return self.stage == other.stage and np.array_equal(self.losses, other.losses)

    @property
    def epochs(self):
        return np.arange(len(self.losses))

    @classmethod
    def from_records(cls, records, stage=None):
        '''
        Build a trace from {'epoch', 'loss'[, 'stage']} records, keeping those of
        ``stage`` when it is given. Epochs must run 0, 1, 2... in order.
        '''
        losses = []
        for rec in records:
            if stage is not None and rec.get('stage', stage) != stage:
                continue
            if rec['epoch'] != len(losses):
                raise MalformedTraceError('Expected epoch {} in stage {} trace, found epoch {}'.format(
                    len(losses), stage, rec['epoch']))
            losses.append(rec['loss'])
        return cls(losses, stage)

    def to_records(self):
        records = [{'epoch': int(e), 'loss': float(v)} for e, v in enumerate(self.losses)]
        if self.stage is not None:
            for rec in records:
                rec['stage'] = self.stage
        return records


def parse_trace_record(line, lineno=None):
    '''
    Decode one line of a loss-trace file into {'epoch', 'loss', 'stage'}. Blank lines
    give None.
    '''
    line = line.strip()
    if not line:
        return None
    where = ' (line {})'.format(lineno) if lineno is not None else ''
    try:
        rec = json.loads(line)
        epoch = rec['epoch']
        loss = float(rec['loss'])
        stage = rec.get('stage', 1)
    except (ValueError, KeyError, TypeError) as err:
        raise MalformedTraceError('Malformed trace record{}: {!r}'.format(where, line)) from err
    if isinstance(epoch, bool) or not isinstance(epoch, int) or epoch < 0 or stage not in (1, 2) \
            or not math.isfinite(loss):
        raise MalformedTraceError('Malformed trace record{}: {!r}'.format(where, line))
    return {'stage': stage, 'epoch': epoch, 'loss': loss}


def run_early_stop(trace, policy):
    '''
    Fold observe over a loss trace

    Observation ends at the first Stop or at the end of the trace.

    Returns:
    --------
    best_epoch: int
    stop_epoch: int
        Last observed epoch
    state: SessionState
    '''
    if len(trace) == 0:
        raise EmptyTraceError('Cannot run early stopping on an empty loss trace')
    state = SessionState()
    for loss in trace.losses:
        state, decision = observe(state, policy, loss)
        if decision.stop:
            break
    return state.best_epoch, state.epoch - 1, state


def stop_reason(state):
    '''patience, budget or trace-exhausted'''
    if state.history and state.history[-1].stop:
        return state.history[-1].reason
    return 'trace-exhausted'


def stop_summary(state, policy, stage=None):
    '''Summary record of a finished run'''
    return {'stage': stage, 'best_epoch': state.best_epoch, 'stop_epoch': state.epoch - 1,
            'reason': stop_reason(state), **policy.to_dict()}


@dataclass(frozen=True)
class TwoStageSchedule():
    '''
    stage1, stage2: StopPolicy
    freeze_encoder: per-stage flag, informational only, the trainer enforces it
    '''
    stage1: StopPolicy = field(default_factory=StopPolicy)
    stage2: StopPolicy = field(default_factory=StopPolicy)
    freeze_encoder: tuple = (True, False)

    @classmethod
    def from_dict(cls, stop_params):
        '''
        stop_params may hold one policy for both stages, or stage1/stage2 sub-dictionaries
        on top of the shared entries
        '''
        params = dict(stop_params)
        stage1 = params.pop('stage1', {}) or {}
        stage2 = params.pop('stage2', {}) or {}
        freeze = tuple(params.pop('freeze_encoder', (True, False)))
        return cls(StopPolicy.from_dict({**params, **stage1}), StopPolicy.from_dict({**params, **stage2}), freeze)


def two_stage_run(stage1, stage2, schedule):
    '''
    Early stopping over both training stages

    Stage 2 starts with the stage-1 checkpoint as incumbent: its l_min is the stage-1
    reference loss and its best epoch is the sentinel -1, which stays in place when
    no stage-2 epoch improves on it.

    Parameters:
    -----------
    stage1, stage2: LossTrace
    schedule: TwoStageSchedule

    Returns:
    --------
    result: dict
        {'stage1': summary, 'stage2': summary, 'best': {'stage', 'epoch'}}
    '''
    if len(stage1) == 0:
        raise EmptyTraceError('Stage 1 loss trace is empty')
    if len(stage2) == 0:
        raise EmptyTraceError('Stage 2 loss trace is empty')
    _, _, state1 = run_early_stop(stage1, schedule.stage1)

    state2 = SessionState(l_min=state1.l_min)
    for loss in stage2.losses:
        state2, decision = observe(state2, schedule.stage2, loss)
        if decision.stop:
            break

    result = combined_summary(state1, schedule.stage1, state2, schedule.stage2)
    logger.info('Two-stage run: stage 1 best %d, stage 2 best %d, keeping stage %d epoch %d',
                state1.best_epoch, state2.best_epoch, result['best']['stage'], result['best']['epoch'])
    return result


def savgol_smooth(trace, window=11, order=4):
    '''
    Savitzky-Golay smoothing of a loss trace

    Edge samples are taken from the polynomial fitted on the first and last full window.

    Parameters:
    -----------
    trace: LossTrace
    window: int
        Odd, > order, <= len(trace)
    order: int

    Returns:
    --------
    LossTrace
        Same stage and epochs
    '''
    if window % 2 != 1 or window <= order or window < 1:
        raise InvalidWindowError('Window must be odd and larger than the polynomial order {}, got {}'.format(
            order, window), parameter='window')
    if len(trace) < window:
        raise InvalidWindowError('Window {} is longer than the {}-epoch trace'.format(window, len(trace)),
                                 parameter='window')
    return replace(trace, losses=savgol_filter(trace.losses, window, order, mode='interp'))


# ---------------------------------- Follow mode ----------------------------------
def combined_summary(state1, policy1, state2=None, policy2=None):
    result = {'stage1': stop_summary(state1, policy1, 1)}
    if state2 is None:
        result['best'] = {'stage': 1, 'epoch': state1.best_epoch}
        return result
    result['stage2'] = stop_summary(state2, policy2, 2)
    if state2.best_epoch < 0:
        result['best'] = {'stage': 1, 'epoch': state1.best_epoch}
    else:
        result['best'] = {'stage': 2, 'epoch': state2.best_epoch}
    return result


def follow_trace(trace_path, decisions_path, policy, stage2_policy=None, poll_interval=1.0, timeout=None):
    '''
    Watch an append-only loss-trace file and answer every new epoch

    One JSON decision line {'stage', 'epoch', 'decision', 'best_epoch', 'reason'} is
    appended to ``decisions_path`` per observed record. With ``stage2_policy`` the
    first stage-2 record starts a second session seeded with the stage-1 reference
    loss, otherwise stage-2 records are an error. Returns when the last session stops,
    or when ``timeout`` seconds pass without a new record.

    Parameters:
    -----------
    trace_path, decisions_path: str
    policy: StopPolicy
    stage2_policy: StopPolicy, optional
    poll_interval: float
        seconds between polls
    timeout: float, optional
        seconds without new data before giving up, None waits forever

    Returns:
    --------
    summary: dict
        as two_stage_run, without 'stage2' for a single-stage session
    '''
    stage, state, active = 1, SessionState(), policy
    state1 = None
    offset, lineno, buffer = 0, 0, ''
    last_data = time.monotonic()

    with open(decisions_path, 'a') as out:
        while True:
            chunk = ''
            if os.path.exists(trace_path):
                with open(trace_path) as f:
                    f.seek(offset)
                    chunk = f.read()
                    offset = f.tell()
            if chunk:
                last_data = time.monotonic()
            *lines, buffer = (buffer + chunk).split('\n')

            for line in lines:
                lineno += 1
                rec = parse_trace_record(line, lineno)
                if rec is None:
                    continue
                if rec['stage'] == 2 and stage == 1:
                    if stage2_policy is None:
                        raise MalformedTraceError('Stage 2 record at line {} without a stage 2 policy'.format(lineno))
                    state1, stage, active = state, 2, stage2_policy
                    state = SessionState(l_min=state1.l_min)
                if rec['stage'] != stage or rec['epoch'] != state.epoch:
                    raise MalformedTraceError('Expected stage {} epoch {} at line {}, found stage {} epoch {}'.format(
                        stage, state.epoch, lineno, rec['stage'], rec['epoch']))
                state, decision = observe(state, active, rec['loss'])
                out.write(json.dumps({'stage': stage, **decision.to_dict()}) + '\n')
                out.flush()
                if decision.stop and (stage == 2 or stage2_policy is None):
                    return combined_summary(state1 or state, policy, state if stage == 2 else None, stage2_policy)

            if timeout is not None and time.monotonic() - last_data > timeout:
                logger.warning('No new loss record for %.1f s, giving up on %s', timeout, trace_path)
                if stage == 1:
                    return combined_summary(state, policy)
                return combined_summary(state1, policy, state, stage2_policy)
            time.sleep(poll_interval)
