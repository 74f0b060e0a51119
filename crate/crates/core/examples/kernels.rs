//! The tensor kernels on hand-sized inputs.
//!
//! ```text
//! cargo run --example kernels
//! ```

use obi_core::tensor::{
    concat_channels, conv2d, global_avg_pool, leaky_relu, maxpool, softmax, upsample_nearest,
    ConvParams, Shape, Tensor,
};

pub fn run_example() -> anyhow::Result<()> {
    let ramp = Tensor::new(Shape::new(1, 4, 4), (0..16).map(|v| v as f32).collect())?;

    let mut box_filter = ConvParams::zeros(1, 1, (3, 3), 1, 0, 1);
    box_filter.weights.fill(1.0);
    let sums = conv2d(&ramp, &box_filter)?;
    println!("3x3 window sums over 0..15: {:?}", sums.data());

    println!("2x2/2 max pool: {:?}", maxpool(&ramp, 2, 2)?.data());
    let wide = Tensor::from_fn(Shape::new(1, 13, 13), |_, y, x| (y * 13 + x) as f32);
    println!("2x2/1 max pool keeps the extent: {}", maxpool(&wide, 2, 1)?.shape());

    let cell = Tensor::new(Shape::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0])?;
    println!("nearest upsample x2: {:?}", upsample_nearest(&cell, 2)?.data());
    println!("global average: {:?}", global_avg_pool(&cell).data());
    println!("concat channels: {}", concat_channels(&cell, &cell)?.shape());

    let logits = Tensor::vector(vec![1000.0, 0.0, -3.0])?;
    println!("softmax of large logits: {:?}", softmax(&logits)?.data());
    println!("leaky relu: {:?}", leaky_relu(&Tensor::vector(vec![1.0, -1.0])?, 0.1).data());
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
