import os

from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

# criterion -> {part: passed}, filled by the acceptance suite
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        status = "PASS" if all(parts.values()) else "FAIL"
        detail = "; ".join(f"{name}: {'PASS' if ok else 'FAIL'}" for name, ok in parts.items())
        terminalreporter.write_line(f"criterion {k}: {status} ({detail})")
