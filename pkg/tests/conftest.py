import pytest

# criterion number and label per acceptance test, for the FAIL line that
# mirrors report_line's PASS output
ACCEPTANCE_CRITERIA = {
    "test_c01_gradient_oracle": (1, "gradient oracle"),
    "test_c02_fgsm_identity_and_bound": (2, "fgsm identity and bound"),
    "test_c03_attack_effectiveness": (3, "attack effectiveness"),
    "test_c04_metric_oracles": (4, "metric oracles"),
    "test_c05_resource_utilization_formula": (5, "resource utilization formula"),
    "test_c06_sweep_shape": (6, "sweep shape"),
    "test_c07_retraining_recovery": (7, "retraining recovery"),
    "test_c08_configuration_semantics": (8, "configuration semantics"),
    "test_c09_run_determinism": (9, "run determinism"),
    "test_c10_trend_report": (10, "trend report"),
    "test_c11_timing_accounting": (11, "timing accounting"),
}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    if report.when == "call" and report.failed and item.name in ACCEPTANCE_CRITERIA:
        number, name = ACCEPTANCE_CRITERIA[item.name]
        lines = report.longreprtext.splitlines() if report.longreprtext else []
        asserts = [l[2:].strip() for l in lines if l.startswith("E ")]
        reason = asserts[0] if asserts else (lines[-1] if lines else "error")
        print(f"\nACCEPTANCE {number:>2} {name}: FAIL ({reason})")
    return report
