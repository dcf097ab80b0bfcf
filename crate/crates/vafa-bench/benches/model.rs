use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use vafa_bench::{random_tensor, random_volume};
use vafa_core::autodiff::{Precision, Tape};
use vafa_core::conv::{conv3d_backward_input, conv3d_forward};
use vafa_core::losses::dice_loss;
use vafa_core::model::SegModel;
use vafa_core::volume::LabelField;

fn bench_conv(c: &mut Criterion) {
    let x = random_tensor(1, &[8, 32, 32, 32]);
    let w = random_tensor(2, &[8, 8, 3, 3, 3]);
    let b = random_tensor(3, &[8]);
    c.bench_function("conv3d_fwd_8x32", |bch| {
        bch.iter(|| black_box(conv3d_forward(black_box(&x), &w, &b)))
    });
    let gout = random_tensor(4, &[8, 32, 32, 32]);
    c.bench_function("conv3d_bwd_input_8x32", |bch| {
        bch.iter(|| black_box(conv3d_backward_input(black_box(&gout), &[8, 32, 32, 32], &w)))
    });
}

fn bench_attack_step(c: &mut Criterion) {
    // one objective evaluation + gradient w.r.t. the input on a 32^3 volume
    let side = 32usize;
    let model = SegModel::init(4, 7);
    let x = random_volume(5, side);
    let mut rng = vafa_core::rng::Rng::new(6);
    let classes: Vec<u8> =
        (0..side * side * side).map(|_| rng.below(4) as u8).collect();
    let y = LabelField::new(classes, [side, side, side], 4).unwrap();
    c.bench_function("dice_grad_input_32", |bch| {
        bch.iter(|| {
            let tape = Tape::new(Precision::F64);
            let xv = tape.param(x.tensor().clone());
            let logits = model.forward_frozen(&tape, xv);
            let loss = dice_loss(&tape, logits, &y);
            black_box(tape.backward(loss.node, &[xv]))
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_attack_step
}
criterion_main!(benches);
