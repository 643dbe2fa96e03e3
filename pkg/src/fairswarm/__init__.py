"""Fair-exchange piece trading protocols and a swarm simulator around them.

The package splits into stacked layers:

* :mod:`fairswarm.crypto`      -- keyed envelopes with withholdable release keys
* :mod:`fairswarm.protocol`    -- the message-level exchange state machines
* :mod:`fairswarm.swarm`       -- round-based peer-to-peer network simulation
* :mod:`fairswarm.metrics`     -- per-round measurements over a simulation
* :mod:`fairswarm.experiments` -- scenario presets and CSV emission
* :mod:`fairswarm.report`      -- SVG charts and summary tables
* :mod:`fairswarm.cli`         -- the ``fairswarm`` command
"""

__version__ = "0.1.0"
