use criterion::{black_box, criterion_group, criterion_main, Criterion};
use crossview::data::View;
use crossview::embedder::{Embedder, EmbedderConfig};
use crossview::metrics::{fid, ssim};
use crossview::nn::{Conv2d, ConvConfig};
use crossview::{ParamStore, Tensor, Var};
use crossview_bench::{rng, uniform};

fn conv(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let layer = Conv2d::new(&mut store, "conv", ConvConfig::same(32, 32, 3), &mut rng(0));
    let x = uniform(&[8, 32, 32, 32], 1);
    c.bench_function("conv3x3_32ch_32x32_b8_forward_backward", |b| {
        b.iter(|| {
            let ctx = store.ctx(true);
            let y = layer.forward(&ctx, &Var::leaf(x.clone())).unwrap();
            black_box(y.square().mean().backward().unwrap());
        })
    });
}

fn metrics(c: &mut Criterion) {
    let a = uniform(&[8, 3, 32, 128], 2).map(|v| (v + 1.0) / 2.0);
    let b = uniform(&[8, 3, 32, 128], 3).map(|v| (v + 1.0) / 2.0);
    c.bench_function("ssim_b8_32x128", |bch| bch.iter(|| ssim(black_box(&a), black_box(&b)).unwrap()));

    let f1 = Tensor::randn([512, 256], &mut rng(4));
    let f2 = Tensor::randn([512, 256], &mut rng(5));
    c.bench_function("fid_512x256", |bch| bch.iter(|| fid(black_box(&f1), black_box(&f2)).unwrap()));
}

fn embedder(c: &mut Criterion) {
    let mut e = Embedder::new(EmbedderConfig::default(), 0).unwrap();
    e.freeze();
    let imgs = uniform(&[8, 3, 64, 64], 6);
    c.bench_function("embed_aerial_b8_64x64", |b| b.iter(|| e.embed(black_box(&imgs), View::Aerial).unwrap()));
}

criterion_group!(benches, conv, metrics, embedder);
criterion_main!(benches);
