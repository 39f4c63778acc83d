"""Shared fixtures.

Most tests build tiny stores of their own; the fixtures here only cover the
pieces nearly every module needs: a default config, a deterministic synthesis
provider, a template context, and a freshly ingested copy of the bundled
movie fixture.
"""

import pytest

from prismdb.backend import DeterministicProvider
from prismdb.config import EngineConfig
from prismdb.demo import load_demo_store
from prismdb.embedding import HashedEmbedder
from prismdb.templates import TemplateContext


@pytest.fixture()
def config():
    return EngineConfig()


@pytest.fixture()
def provider(config):
    return DeterministicProvider(config)


@pytest.fixture()
def ctx(config):
    return TemplateContext(embedder=HashedEmbedder(dim=config.embedder_dim))


@pytest.fixture()
def demo_store():
    """A fresh store holding the bundled movie catalog with its text and
    scene annotations. Function scoped because executions mutate it."""
    return load_demo_store()
