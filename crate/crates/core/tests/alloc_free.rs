//! The per-frame hot path must not touch the heap once the engine is built.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use num_complex::Complex64;
use online_auxiva::linalg::CVec;
use online_auxiva::separator::{
    ContrastModel, OnlineConfig, OnlineSeparator, SourceSelector, UpdateMethod,
};

struct Counting;

static ALLOCATIONS: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        ALLOCATIONS.fetch_add(1, Ordering::SeqCst);
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        ALLOCATIONS.fetch_add(1, Ordering::SeqCst);
        System.realloc(ptr, layout, new_size)
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

fn frames(k: usize, bins: usize, n: usize) -> Vec<Vec<CVec>> {
    (0..n)
        .map(|t| {
            (0..bins)
                .map(|f| {
                    let v: Vec<Complex64> = (0..k)
                        .map(|i| {
                            let p = (t * 31 + f * 7 + i * 13) as f64;
                            Complex64::new((p * 0.37).sin(), (p * 0.11).cos())
                                * (1.0 + (t % 5) as f64)
                        })
                        .collect();
                    CVec::from_slice(&v).unwrap()
                })
                .collect()
        })
        .collect()
}

#[test]
fn process_frame_does_not_allocate_after_warm_up() {
    let (k, bins) = (3, 65);
    let input = frames(k, bins, 60);
    for method in [UpdateMethod::Iss, UpdateMethod::Ip] {
        for selector in [SourceSelector::All, SourceSelector::one(1, 20).unwrap()] {
            let cfg = OnlineConfig {
                method,
                selector,
                update_period: 2,
                ..Default::default()
            };
            let mut sep = OnlineSeparator::new(k, bins, cfg, ContrastModel::laplace(bins))
                .unwrap()
                .with_threads(1)
                .unwrap();
            let mut y = vec![CVec::zeros(k); bins];
            let mut z = vec![CVec::zeros(k); bins];
            for x in &input[..5] {
                sep.process_frame(x, &mut y).unwrap();
                sep.project_back_frame(&y, &mut z).unwrap();
            }
            let before = ALLOCATIONS.load(Ordering::SeqCst);
            for x in &input[5..] {
                sep.process_frame(x, &mut y).unwrap();
                sep.project_back_frame(&y, &mut z).unwrap();
            }
            let after = ALLOCATIONS.load(Ordering::SeqCst);
            assert_eq!(after - before, 0, "{method} {selector:?} allocated");
            assert!(sep.faults().is_empty());
        }
    }
}
