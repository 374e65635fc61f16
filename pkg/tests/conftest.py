import pytest

from kvreduce.decoder import DecoderConfig, build_decoder


@pytest.fixture(scope="session")
def small_decoder():
    return build_decoder(DecoderConfig(layers=2, heads=2, d_model=16, vocab=32, max_positions=256))


@pytest.fixture(scope="session")
def alibi_decoder():
    return build_decoder(
        DecoderConfig(layers=2, heads=2, d_model=16, vocab=32, max_positions=256, position_encoding="alibi")
    )


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
