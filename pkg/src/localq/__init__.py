"""Layer-local deep Q-learning.

A small, self-contained engine for training value networks in which every
layer computes its own temporal-difference error and updates its own weights;
no gradient ever crosses a layer boundary. Upper layers talk to lower layers
only by sending their activations forward in time. The package also ships
native reimplementations of the desk-scale environments it is evaluated on,
a conventional backprop DQN baseline, a layer-local image classifier, and a
CLI for running and analyzing experiments.
"""

__version__ = "0.1.0"
