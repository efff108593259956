"""Watermark autoscaler for the loader, predictor and writer stages.

Rules, evaluated once per tick:

* loaders +1 when the predictor input queue stays below the low watermark,
  -1 when it stays above the high watermark;
* predictors +1 (on the most backlogged node) when a predictor queue stays
  above the high watermark while device utilization is under the threshold,
  -1 (on the least backlogged node) when predictor queues stay below the low
  watermark;
* writers +1 when the write queue stays above the high watermark, -1 when it
  stays below the low watermark.

A condition must hold for ``consecutive_ticks`` ticks in a row. After a stage
acts it sits out ``cooldown_ticks`` ticks; its streaks restart from zero once
the cooldown is over. Counts are clamped to [1, max].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

from .spec import LOADER, WRITER, AutoscaleConfig

log = logging.getLogger(__name__)

PREDICT = "predict"


@dataclass
class Observation:
    predict_input: float
    node_occupancy: dict
    write: float
    utilization: float
    loaders: int
    writers: int
    predictors: dict


@dataclass(frozen=True)
class ScaleAction:
    stage: str  # LOADER, WRITER or a predictor node id
    delta: int


@dataclass
class _StageState:
    up: int = 0
    down: int = 0
    cooldown: int = 0


class Autoscaler:
    def __init__(
        self,
        config: AutoscaleConfig,
        loader_max: int,
        writer_max: int,
        node_max: dict,
        device_room: Optional[Callable[[str], bool]] = None,
    ):
        self.config = config
        self.loader_max = loader_max
        self.writer_max = writer_max
        self.node_max = dict(node_max)
        self.device_room = device_room or (lambda node_id: True)
        self.state = {LOADER: _StageState(), PREDICT: _StageState(), WRITER: _StageState()}
        self.saturated_ticks = 0

    def _step(self, name: str, up_cond: bool, down_cond: bool) -> Optional[int]:
        st = self.state[name]
        if st.cooldown > 0:
            st.cooldown -= 1
            st.up = st.down = 0
            return None
        st.up = st.up + 1 if up_cond else 0
        st.down = st.down + 1 if down_cond else 0
        k = self.config.consecutive_ticks
        if st.up >= k:
            return +1
        if st.down >= k:
            return -1
        return None

    def _fired(self, name: str) -> None:
        st = self.state[name]
        st.up = st.down = 0
        st.cooldown = self.config.cooldown_ticks

    def tick(self, obs: Observation) -> list[ScaleAction]:
        cfg = self.config
        lo, hi = cfg.low_watermark, cfg.high_watermark
        actions: list[ScaleAction] = []

        d = self._step(LOADER, obs.predict_input < lo, obs.predict_input > hi)
        if d == +1 and obs.loaders < self.loader_max or d == -1 and obs.loaders > 1:
            actions.append(ScaleAction(LOADER, d))
            self._fired(LOADER)

        occ = obs.node_occupancy
        peak = max(occ.values(), default=0.0)
        backlogged = peak > hi
        if backlogged and obs.utilization >= cfg.util_threshold:
            self.saturated_ticks += 1
            log.debug("predictor queues full with devices busy (%.2f); no action", obs.utilization)
        d = self._step(PREDICT, backlogged and obs.utilization < cfg.util_threshold, peak < lo)
        if d == +1:
            growable = [
                n for n in occ
                if obs.predictors.get(n, 0) < self.node_max.get(n, 1) and self.device_room(n)
            ]
            if growable:
                node = max(growable, key=lambda n: (occ[n], n))
                actions.append(ScaleAction(node, +1))
                self._fired(PREDICT)
        elif d == -1:
            shrinkable = [n for n in occ if obs.predictors.get(n, 0) > 1]
            if shrinkable:
                node = min(shrinkable, key=lambda n: (occ[n], n))
                actions.append(ScaleAction(node, -1))
                self._fired(PREDICT)

        d = self._step(WRITER, obs.write > hi, obs.write < lo)
        if d == +1 and obs.writers < self.writer_max or d == -1 and obs.writers > 1:
            actions.append(ScaleAction(WRITER, d))
            self._fired(WRITER)
        return actions
