"""Limited-angle CT reconstruction cleaned up by projection onto a GAN's image manifold."""

__version__ = "0.1.0"
