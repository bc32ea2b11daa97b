//! Regenerates the golden blob fixtures under tests/golden/.

use reef_core::codec::encode;
use reef_core::device::InstructionKind;
use reef_core::quant::QuantizedBlock;
use reef_core::tensor::TensorShape;

fn pattern_block(rows: usize, cols: usize, scale: f64, zp: u8) -> QuantizedBlock {
    let values = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| ((i * 31 + j * 7) & 0xFF) as u8))
        .collect();
    QuantizedBlock::new(TensorShape::new(rows, cols).unwrap(), values, scale, zp).unwrap()
}

fn main() {
    let dir = std::path::Path::new("crates/reef-core/tests/golden");
    std::fs::create_dir_all(dir).unwrap();
    let one = QuantizedBlock::new(TensorShape::new(1, 1).unwrap(), vec![7], 1.0, 0).unwrap();
    std::fs::write(
        dir.join("one_by_one.rfb"),
        encode(&one, InstructionKind::FullyConnected),
    )
    .unwrap();
    let padded = pattern_block(130, 5, 0.5, 128);
    std::fs::write(
        dir.join("padded_130x5.rfb"),
        encode(&padded, InstructionKind::Add),
    )
    .unwrap();
    let square = pattern_block(2048, 2048, 1.0, 0);
    std::fs::write(
        dir.join("square_2048.rfb"),
        encode(&square, InstructionKind::Conv2d),
    )
    .unwrap();
    println!("golden fixtures written");
}
