"""Streaming inference with a rolling per-frame cache.

Each pushed frame computes only its own backbone/proposals/pooled features;
the previous frames' artifacts come from the cache (at most T entries).
Outputs are identical to recomputing the whole window from scratch.
"""

import numpy as np

from .model import UltraDet, window_ids


class StreamSession:
    def __init__(self, model: UltraDet, flow_source):
        self.model = model
        self.flow_source = flow_source
        self.cache = {}
        self.next_index = 0
        self._frame_shape = None

    def push(self, frame):
        """Process the next frame; returns its Detections."""
        frame = np.asarray(frame)
        if self._frame_shape is None:
            self._frame_shape = frame.shape
        elif frame.shape != self._frame_shape:
            raise ValueError(
                f"frame shape changed mid-stream: {frame.shape} vs {self._frame_shape}")
        t = self.next_index
        self.next_index += 1
        self.cache[t] = self.model.frame_artifacts(frame, t)
        ids = window_ids(t, self.model.cfg.t_prev)
        out = self.model.forward_window([None] * len(ids), ids, self.flow_source,
                                        cache=self.cache)
        low = t - self.model.cfg.t_prev + 1
        for fid in [k for k in self.cache if k < low]:
            del self.cache[fid]
        return out.detections

    def cache_size(self):
        return len(self.cache)
