"""Preference-shaped driving agent fed by a simulated hybrid brain-computer interface.

Stages: synthetic physiology and object features (:mod:`synth`), a two-level
interest classifier (:mod:`hdca`), graph-based label extrapolation
(:mod:`tag`), a car-following world (:mod:`env`), a hybrid reward
(:mod:`reward`) and a double deep-Q learner (:mod:`nn`, :mod:`dqn`),
evaluated by :mod:`metrics` and driven from :mod:`cli`.
"""
__version__ = "0.1.0"
