"""Continual imitation learning with generative trajectory replay on a pixel gridworld.

Modules:

- ``taskforge``: the task suite, environment dynamics, scripted expert and renderer
- ``corpus``: demonstrations, replay buffers and the on-disk dataset format
- ``nets``: generator, critic, policy and predictor networks with their losses
- ``replay``: the replay strategies (finetune, rehearsal, two DGR baselines, CRIL)
- ``loop``: the continual training driver and run directories
- ``evalkit``: accuracy, success rate and the Omega metrics
- ``report`` / ``cli``: plots, tables and the command line
"""

__version__ = "0.1.0"
