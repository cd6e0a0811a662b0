"""skinssl: self-supervised pretraining for magnetic tactile skin on a robot hand."""

from skinssl.config import PROJECT_VERSION

__version__ = PROJECT_VERSION
