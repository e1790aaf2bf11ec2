"""Spiking actor-critic crowd navigation toolkit.

Subpackages:
  diffcore    -- numpy-backed reverse-mode autodiff with surrogate spike ops
  snncore     -- CUBA and sigma-delta neuron layers, encode/decode boundary
  crowdenv    -- social-navigation simulator, scenarios, rewards, observations
  policynet   -- spiking feature extractor, spiking actor, conventional critic
  ppotrain    -- rollout collection, GAE, clipped-objective PPO, Adam
  energymeter -- synop/neuron-update counting and per-device joule estimates
  harness     -- evaluation metrics, aggregation, and the command line
"""

__version__ = "0.1.0"
