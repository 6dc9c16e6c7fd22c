"""pipekeeper: policy-bounded decision control plane for CI/CD pipelines."""

__version__ = "0.1.0"
