"""End-to-end smoke test of the pathloss_py extension.

Build and install first:

    (cd crates/py && maturin build --release -o dist) && pip install crates/py/dist/*.whl
    python python/smoke_test.py
"""

import sys

import pathloss_py as pl


def main() -> int:
    campaign = pl.synth_campaign(1500, seed=3)
    kept, ledger = campaign.clean(contamination=0.01, seed=3)
    train, test = kept.split(0.2)
    print(f"{campaign!r}: kept {ledger['kept']} of {ledger['input']}, train {len(train)}, test {len(test)}")
    assert len(train.design_columns("poly2")) == 37

    model = pl.fit(train, features="linear")
    print(f"exponent {model.coefficient('z_d'):.3f}  brick {model.coefficient('w_brick'):.2f} dB")

    cv = pl.cross_validate(train, features="linear", k=5, gap_hours=24.0)
    rmse, sd = cv.rmse
    print(f"CV RMSE {rmse:.2f} +/- {sd:.2f} dB")

    law = pl.select_residual_law(cv.residuals, kmax=3, n_init=2)
    print(f"residual law: {law['selected_kind']}")

    holdout = model.residuals(test)
    rows = pl.calibrate(cv, holdout, replicates=300, seed=3)
    for r in rows:
        ci = r["ci"]
        print(f"p={r['p']:.2f}  FM {r['fm_db']:6.2f} dB  [{ci['lo']:.2f}, {ci['hi']:.2f}]  PDR {r['achieved_pdr']:.4f}  ({r['estimator']})")
    fms = [r["fm_db"] for r in rows]
    assert fms == sorted(fms), "margins must grow with reliability"

    try:
        pl.cross_validate(train, features="cubic")
    except ValueError as e:
        print(f"rejected bad option: {e}")
    else:
        raise AssertionError("bad feature kind accepted")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
