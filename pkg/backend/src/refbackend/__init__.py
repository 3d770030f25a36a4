"""Reference wire-protocol backend serving fill-mask and classification."""

from .server import BackendConfig, ModelRuntime, serve

__all__ = ["BackendConfig", "ModelRuntime", "serve"]
