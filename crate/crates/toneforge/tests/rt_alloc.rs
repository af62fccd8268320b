//! Real-time safety: `process_block` must not touch the allocator, even
//! across a staged tone swap. This file installs a counting global allocator
//! and holds exactly one test so no concurrent test can pollute the counts.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicU64, Ordering};

struct CountingAllocator;

static ALLOCS: AtomicU64 = AtomicU64::new(0);
static DEALLOCS: AtomicU64 = AtomicU64::new(0);

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        ALLOCS.fetch_add(1, Ordering::Relaxed);
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        DEALLOCS.fetch_add(1, Ordering::Relaxed);
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        ALLOCS.fetch_add(1, Ordering::Relaxed);
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static ALLOCATOR: CountingAllocator = CountingAllocator;

#[test]
fn process_block_is_allocation_free() {
    use toneforge::cond::{Granularity, ToneEmbedding};
    use toneforge::encoder::{EncoderConfig, EncoderWeights};
    use toneforge::gcn::{CondMode, GcnConfig};
    use toneforge::rng::Rng;
    use toneforge::store::ModelBundle;
    use toneforge::stream::{prepare_tone, StreamProcessor};

    // Desk-scale hypernet model, as in the real-time criterion.
    let encoder = EncoderWeights::init(EncoderConfig::default(), &mut Rng::new(1));
    let bundle = ModelBundle::init(
        GcnConfig::desk(CondMode::Hypernet),
        Granularity::PerChannel,
        32,
        encoder,
        1,
    )
    .unwrap();
    let mut rng = Rng::new(2);
    let phi = ToneEmbedding::new(
        (0..bundle.embedding_dim())
            .map(|_| rng.normal() as f32)
            .collect(),
        None,
    )
    .unwrap();
    let phi2 = ToneEmbedding::new(
        (0..bundle.embedding_dim())
            .map(|_| rng.normal() as f32)
            .collect(),
        None,
    )
    .unwrap();

    let block = 128;
    let mut proc = StreamProcessor::new(&bundle, Some(&phi), block).unwrap();
    let staged = prepare_tone(&bundle, Some(&phi2)).unwrap();
    let input: Vec<f32> = (0..block).map(|_| (rng.normal() * 0.3) as f32).collect();
    let mut output = vec![0.0f32; block];

    // Warm up outside the measured window.
    for _ in 0..8 {
        proc.process_block(&input, &mut output).unwrap();
    }
    // Stage a tone swap so the measured window covers the swap path too.
    proc.set_tone(staged).unwrap();

    let allocs_before = ALLOCS.load(Ordering::SeqCst);
    let deallocs_before = DEALLOCS.load(Ordering::SeqCst);
    for _ in 0..256 {
        proc.process_block(&input, &mut output).unwrap();
    }
    let allocs = ALLOCS.load(Ordering::SeqCst) - allocs_before;
    let deallocs = DEALLOCS.load(Ordering::SeqCst) - deallocs_before;

    println!("ACCEPTANCE 8b allocation-free process_block: allocs={allocs} deallocs={deallocs}");
    assert_eq!(allocs, 0, "process_block allocated {allocs} times");
    assert_eq!(deallocs, 0, "process_block deallocated {deallocs} times");
    assert!(output.iter().all(|v| v.is_finite()));
}
