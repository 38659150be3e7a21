//! Builds the joint post/OCR token sequence and encodes it with the seeded
//! stand-in transformer: `cargo run --example text_encoding -- "<post>" "<ocr>"`.

use candle_core::DType;
use semfuse::explain::export_attention;
use semfuse::text::TextEncoder;

fn main() -> semfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let post = args
        .next()
        .unwrap_or_else(|| "Check this out https://t.co/x #news @someone".into());
    let ocr = args.next().unwrap_or_else(|| "TEXT IN THE MEME".into());

    let enc = TextEncoder::standin(7, DType::F32, false)?;
    let seq = enc.prepare(&post, &ocr)?;
    println!("tokens: {:?}", seq.tokens);
    println!("segments: {:?}", seq.segment_ids);

    let repr = enc.encode(&seq)?;
    println!(
        "final CLS: {} dims, intermediate CLS (layer {}): {} dims",
        repr.final_.len(),
        enc.backbone.intermediate_layer(),
        repr.intermediate.len()
    );

    let att = export_attention(enc.backbone.as_ref(), &seq)?;
    println!(
        "last-layer attention: {} heads, max row-sum error {:.2e}",
        att.heads(),
        att.max_row_error()
    );
    Ok(())
}
