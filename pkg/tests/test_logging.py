import logging

from src.utils.logging import setup_logging


def test_level_from_environment(monkeypatch):
    monkeypatch.setenv("AFFECT_LOG_LEVEL", "warning")
    assert setup_logging() == logging.WARNING


def test_explicit_level_wins_and_quiets_numba(monkeypatch):
    monkeypatch.setenv("AFFECT_LOG_LEVEL", "ERROR")
    assert setup_logging("debug") == logging.DEBUG
    assert logging.getLogger().level == logging.DEBUG
    assert logging.getLogger("numba").level == logging.WARNING


def test_unknown_level_falls_back_to_info():
    assert setup_logging("chatty") == logging.INFO
