//! Fleiss' kappa for a panel of annotators: the classic 10-item, 14-rater,
//! 5-category table, then a small per-item label list.

use semfuse::data::{fleiss_kappa, AnnotationMatrix};

fn main() -> semfuse::Result<()> {
    let table = vec![
        vec![0, 0, 0, 0, 14],
        vec![0, 2, 6, 4, 2],
        vec![0, 0, 3, 5, 6],
        vec![0, 3, 9, 2, 0],
        vec![2, 2, 8, 1, 1],
        vec![7, 7, 0, 0, 0],
        vec![3, 2, 6, 3, 0],
        vec![2, 5, 3, 2, 2],
        vec![6, 5, 2, 1, 0],
        vec![0, 2, 2, 3, 7],
    ];
    let m = AnnotationMatrix::new(table)?;
    println!(
        "{} items, {} raters: kappa = {:.4}",
        m.items(),
        m.raters(),
        fleiss_kappa(&m)?
    );

    // Three annotators labelling four posts as 0 (non-antisemitic) or 1.
    let labels = vec![vec![1, 1, 1], vec![0, 0, 1], vec![0, 0, 0], vec![1, 0, 1]];
    let m = AnnotationMatrix::from_labels(&labels, 2)?;
    println!("binary panel: kappa = {:.4}", fleiss_kappa(&m)?);
    Ok(())
}
