use std::ffi::CStr;
use std::ptr;

use onelora::adapters::{param_count, AdapterKind, Method};
use onelora_ffi::*;

fn new_layer(method: OneloraMethod, rank: usize, d: usize, k: usize, w0: &[f64], beta0: &[f64]) -> *mut OneloraLayer {
    let mut h = ptr::null_mut();
    let st = unsafe { onelora_layer_new(method as i32, rank, d, k, w0.as_ptr(), beta0.as_ptr(), 7, &mut h) };
    assert_eq!(st, OneloraStatus::Ok, "{}", last_error());
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    let p = onelora_last_error();
    if p.is_null() {
        return String::new();
    }
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn forward(h: *const OneloraLayer, x: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; d];
    let st = unsafe { onelora_layer_forward(h, x.as_ptr(), x.len(), y.as_mut_ptr(), d) };
    assert_eq!(st, OneloraStatus::Ok, "{}", last_error());
    y
}

const W0: [f64; 6] = [1.0, -2.0, 0.5, 0.0, 3.0, 1.5];
const BETA0: [f64; 2] = [0.25, -1.0];

#[test]
fn ilora_forward_adds_b_times_input_sum() {
    let h = new_layer(OneloraMethod::OneLora, 1, 2, 3, &W0, &BETA0);
    assert_eq!(unsafe { onelora_layer_param_len(h) }, 2);
    let b = [0.5, -2.0];
    assert_eq!(unsafe { onelora_layer_set_params(h, b.as_ptr(), 2) }, OneloraStatus::Ok);
    let x = [1.0, 2.0, -0.5];
    let y = forward(h, &x, 2);
    let s: f64 = x.iter().sum();
    let want = [1.0 - 4.0 - 0.25 + 0.25 + 0.5 * s, 6.0 - 0.75 - 1.0 - 2.0 * s];
    for (a, b) in y.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    unsafe { onelora_layer_free(h) };
}

#[test]
fn backward_matches_finite_differences_and_merge_matches_forward() {
    for method in [
        OneloraMethod::OneLora,
        OneloraMethod::Lora,
        OneloraMethod::Dora,
        OneloraMethod::DiffFit,
        OneloraMethod::Mora1,
    ] {
        let h = new_layer(method, 1, 2, 3, &W0, &BETA0);
        let n = unsafe { onelora_layer_param_len(h) };
        let theta: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 + 1.0).sin()).collect();
        assert_eq!(
            unsafe { onelora_layer_set_params(h, theta.as_ptr(), n) },
            OneloraStatus::Ok
        );
        let mut back = vec![0.0; n];
        assert_eq!(
            unsafe { onelora_layer_get_params(h, back.as_mut_ptr(), n) },
            OneloraStatus::Ok
        );
        assert_eq!(back, theta);

        let x = [0.7, -1.1, 0.4];
        let g = [1.3, -0.6];
        let mut grad = vec![0.0; n];
        let mut g_in = [0.0; 3];
        let st = unsafe { onelora_layer_backward(h, x.as_ptr(), g.as_ptr(), grad.as_mut_ptr(), n, g_in.as_mut_ptr()) };
        assert_eq!(st, OneloraStatus::Ok, "{}", last_error());

        let f = |h: *mut OneloraLayer, p: &[f64]| {
            unsafe { onelora_layer_set_params(h, p.as_ptr(), n) };
            forward(h, &x, 2).iter().zip(g).map(|(y, g)| y * g).sum::<f64>()
        };
        let eps = 1e-6;
        for i in 0..n {
            let mut p = theta.clone();
            p[i] += eps;
            let up = f(h, &p);
            p[i] -= 2.0 * eps;
            let down = f(h, &p);
            let fd = (up - down) / (2.0 * eps);
            assert!(
                (fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{method:?}[{i}]: {fd} vs {}",
                grad[i]
            );
        }
        unsafe { onelora_layer_set_params(h, theta.as_ptr(), n) };

        let mut w = [0.0; 6];
        let mut beta = [0.0; 2];
        assert_eq!(
            unsafe { onelora_layer_merge(h, w.as_mut_ptr(), beta.as_mut_ptr()) },
            OneloraStatus::Ok
        );
        let y = forward(h, &x, 2);
        for r in 0..2 {
            let merged: f64 = (0..3).map(|c| w[r * 3 + c] * x[c]).sum::<f64>() + beta[r];
            assert!((merged - y[r]).abs() < 1e-10, "{method:?}");
        }
        let mut m = OneloraMethod::All;
        assert_eq!(unsafe { onelora_layer_method(h, &mut m) }, OneloraStatus::Ok);
        assert_eq!(m, method);
        unsafe { onelora_layer_free(h) };
    }
}

#[test]
fn counts_agree_with_the_library() {
    for m in Method::ALL {
        let code = OneloraMethod::from(m) as i32;
        for (k, d) in [(2, 3), (9, 4), (768, 768)] {
            let mut n = 0;
            assert_eq!(unsafe { onelora_param_count(code, k, d, 1, &mut n) }, OneloraStatus::Ok);
            assert_eq!(n, param_count(&AdapterKind::new(m), k, d));
            let mut f = OneloraFlops::default();
            assert_eq!(unsafe { onelora_flop_count(code, k, d, 1, &mut f) }, OneloraStatus::Ok);
        }
    }
    assert_eq!(onelora_mora_rank(768, 768, 1, true), 28);
    let mut f1 = OneloraFlops::default();
    let mut f2 = OneloraFlops::default();
    unsafe {
        onelora_flop_count(OneloraMethod::OneLora as i32, 8, 8, 1, &mut f1);
        onelora_flop_count(OneloraMethod::Lora as i32, 8, 8, 1, &mut f2);
    }
    assert!(f1.mults < f2.mults);
}

#[test]
fn method_names_parse() {
    let mut m = OneloraMethod::All;
    assert_eq!(
        unsafe { onelora_method_from_name(c"mora6".as_ptr(), &mut m) },
        OneloraStatus::Ok
    );
    assert_eq!(m, OneloraMethod::Mora6);
    assert_eq!(
        unsafe { onelora_method_from_name(c"ilora".as_ptr(), &mut m) },
        OneloraStatus::Ok
    );
    assert_eq!(m, OneloraMethod::OneLora);
    assert_eq!(
        unsafe { onelora_method_from_name(c"qlora".as_ptr(), &mut m) },
        OneloraStatus::InvalidArgument
    );
    assert!(last_error().contains("qlora"));
}

#[test]
fn errors_map_to_status_codes() {
    let mut h = ptr::null_mut();
    let st = unsafe { onelora_layer_new(42, 1, 2, 3, W0.as_ptr(), ptr::null(), 0, &mut h) };
    assert_eq!(st, OneloraStatus::InvalidArgument);
    assert!(h.is_null());
    assert!(last_error().contains("42"));

    let st = unsafe { onelora_layer_new(OneloraMethod::Lora as i32, 0, 2, 3, W0.as_ptr(), ptr::null(), 0, &mut h) };
    assert_eq!(st, OneloraStatus::InvalidArgument);

    let st = unsafe { onelora_layer_new(OneloraMethod::Lora as i32, 1, 2, 3, ptr::null(), ptr::null(), 0, &mut h) };
    assert_eq!(st, OneloraStatus::NullPointer);

    let nan = [f64::NAN; 6];
    let st = unsafe {
        onelora_layer_new(
            OneloraMethod::BitFit as i32,
            1,
            2,
            3,
            nan.as_ptr(),
            ptr::null(),
            0,
            &mut h,
        )
    };
    assert_eq!(st, OneloraStatus::Domain);

    let h = new_layer(OneloraMethod::BitFit, 1, 2, 3, &W0, &BETA0);
    let mut y = [0.0; 2];
    let x = [0.0; 4];
    assert_eq!(
        unsafe { onelora_layer_forward(h, x.as_ptr(), 4, y.as_mut_ptr(), 2) },
        OneloraStatus::Shape
    );
    let p = [0.0; 3];
    assert_eq!(
        unsafe { onelora_layer_set_params(h, p.as_ptr(), 3) },
        OneloraStatus::Shape
    );
    assert_eq!(
        unsafe { onelora_layer_forward(ptr::null(), x.as_ptr(), 3, y.as_mut_ptr(), 2) },
        OneloraStatus::NullPointer
    );
    assert_eq!(unsafe { onelora_layer_param_len(ptr::null()) }, 0);
    unsafe {
        onelora_layer_free(h);
        onelora_layer_free(ptr::null_mut());
    }
}

#[test]
fn null_bias_means_zero() {
    let h = new_layer(OneloraMethod::BitFit, 1, 2, 3, &W0, &BETA0);
    let mut z = ptr::null_mut();
    let st = unsafe {
        onelora_layer_new(
            OneloraMethod::BitFit as i32,
            1,
            2,
            3,
            W0.as_ptr(),
            ptr::null(),
            0,
            &mut z,
        )
    };
    assert_eq!(st, OneloraStatus::Ok);
    let x = [1.0, 1.0, 1.0];
    let (a, b) = (forward(h, &x, 2), forward(z, &x, 2));
    assert!((a[0] - b[0] - BETA0[0]).abs() < 1e-15 && (a[1] - b[1] - BETA0[1]).abs() < 1e-15);
    unsafe {
        onelora_layer_free(h);
        onelora_layer_free(z);
    }
}
