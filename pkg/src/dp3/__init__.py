"""Point-cloud conditioned diffusion policies for few-demo visuomotor imitation."""

__version__ = "0.1.0"
