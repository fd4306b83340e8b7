"""BiATT-Pointer: joint bidirectional attention and an RL-trained pointer network for NLVR."""

__version__ = "0.1.0"
