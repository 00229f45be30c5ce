"""Service-oriented task middleware kernel for human-robot collaboration.

Modules: `ontology` (type tree, maps), `formula` (situation language),
`services` (providers and the service lifecycle), `registry` (discovery),
`planner` (state-space planning and arrangement), `frp` (transaction state
machine and recovery), `safeguards` (critical-situation handling), `simenv`
(deterministic scheduler and environment), `scenario` / `cli` (runner).
"""

__version__ = "0.1.0"
