"""Network-level congestion metrics over an episode trace."""

from __future__ import annotations

import numpy as np

from ..errors import DataError


def metrics(trace) -> dict:
    """AVE and STA of the per-step network waiting time.

    ``trace`` is a :class:`~pwltsc.trafficsim.simulator.Trace` or a sequence
    of per-step network totals. AVE is their time average; STA is the mean
    squared deviation from that average.

    >>> metrics([2.0, 4.0])
    {'AVE': 3.0, 'STA': 1.0}
    """
    totals = trace.total_wait() if hasattr(trace, "total_wait") else np.asarray(trace, dtype=np.float64)
    if totals.size == 0:
        raise DataError("metrics need a nonempty trace")
    ave = float(totals.mean())
    sta = float(np.mean((totals - ave) ** 2))
    return {"AVE": ave, "STA": sta}
