"""Shared fixtures."""

from __future__ import annotations

import pytest

from tests.helpers import TARGET, make_micro_domain


@pytest.fixture
def micro_domain():
    return make_micro_domain()


@pytest.fixture
def micro_spec(micro_domain):
    return micro_domain.spec_from_program(TARGET)


@pytest.fixture
def micro_actions(micro_domain):
    return micro_domain.recover_actions(TARGET)
