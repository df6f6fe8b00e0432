use std::ffi::{CStr, CString};
use std::ptr;

use moralis_ffi::*;

fn last_error() -> String {
    let p = moralis_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn simulate_and_fit_round_trip() {
    unsafe {
        let table = moralis_payoff_table_builtin();
        assert_eq!(moralis_payoff_table_len(table), 20);

        let mut kbar = 0.0;
        assert_eq!(moralis_kappa_threshold(table, 1, 0.0, &mut kbar), MoralisStatus::Ok);
        assert!((kbar - 1.5).abs() < 1e-12);

        let pop = moralis_population_new();
        assert_eq!(moralis_population_add(pop, 1.0, 0.194, 0.258, 0.295), MoralisStatus::Ok);

        let mut ds = ptr::null_mut();
        assert_eq!(
            moralis_simulate(pop, table, MoralisArm::N, 150, 42, &mut ds),
            MoralisStatus::Ok
        );
        assert_eq!(moralis_dataset_len(ds), 150 * 40);
        let share = moralis_dataset_selfish_share(ds);
        assert!(share > 0.0 && share < 1.0);

        let mut est = ptr::null_mut();
        assert_eq!(moralis_fit_representative(ds, 0, 1, &mut est), MoralisStatus::Ok);
        let mut params = [0.0; 3];
        let mut se = [0.0; 3];
        assert_eq!(
            moralis_estimate_params(est, params.as_mut_ptr(), se.as_mut_ptr()),
            MoralisStatus::Ok
        );
        let truth = [0.194, 0.258, 0.295];
        for i in 0..3 {
            assert!(se[i] > 0.0);
            assert!(
                (params[i] - truth[i]).abs() < 4.0 * se[i],
                "{i}: {} vs {}",
                params[i],
                truth[i]
            );
        }
        assert!(moralis_estimate_loglik(est) < 0.0);

        // write, read back and refit to the same optimum
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("data.csv").to_str().unwrap()).unwrap();
        assert_eq!(moralis_dataset_write(ds, path.as_ptr()), MoralisStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(moralis_dataset_read(path.as_ptr(), table, &mut back), MoralisStatus::Ok);
        assert_eq!(moralis_dataset_len(back), moralis_dataset_len(ds));
        let mut est2 = ptr::null_mut();
        assert_eq!(moralis_fit_representative(back, 0, 1, &mut est2), MoralisStatus::Ok);
        assert!((moralis_estimate_loglik(est2) - moralis_estimate_loglik(est)).abs() < 1e-9);

        moralis_estimate_free(est2);
        moralis_estimate_free(est);
        moralis_dataset_free(back);
        moralis_dataset_free(ds);
        moralis_population_free(pop);
        moralis_payoff_table_free(table);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let table = moralis_payoff_table_builtin();
        let mut k = 0.0;
        assert_eq!(
            moralis_kappa_threshold(table, 99, 0.0, &mut k),
            MoralisStatus::InvalidArgument
        );
        assert!(last_error().contains("99"));
        assert_eq!(
            moralis_kappa_threshold(ptr::null(), 1, 0.0, &mut k),
            MoralisStatus::NullPointer
        );

        // shares that do not sum to one are caught at simulation time
        let pop = moralis_population_new();
        assert_eq!(moralis_population_add(pop, 0.5, 0.1, 0.2, 0.3), MoralisStatus::Ok);
        let mut ds = ptr::null_mut();
        assert_eq!(
            moralis_simulate(pop, table, MoralisArm::N, 5, 1, &mut ds),
            MoralisStatus::ModelError
        );
        assert!(ds.is_null());
        assert_ne!(moralis_population_add(pop, 0.5, 0.1, 1.5, 0.3), MoralisStatus::Ok);

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("payoffs.csv");
        std::fs::write(&bad, "id,e1,e2,g,l\n1,150,100,15,-2\n").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        let mut t2 = ptr::null_mut();
        assert_eq!(
            moralis_payoff_table_read(bad.as_ptr(), &mut t2),
            MoralisStatus::DataError
        );
        assert!(last_error().contains("line 2"), "{}", last_error());

        // null handles are ignored by the free functions
        moralis_dataset_free(ptr::null_mut());
        moralis_population_free(pop);
        moralis_payoff_table_free(table);
    }
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(moralis_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
