//! Writes a small EMBX file with its manifest, reads it back and validates it.

use tasc::embedding_store::{load_embeddings, save_embeddings, EmbeddingMatrix, Manifest, Role};

fn main() -> tasc::Result<()> {
    let dir = std::env::temp_dir().join("tasc-embx-example");
    std::fs::create_dir_all(&dir).map_err(|e| tasc::Error::io(&dir, e))?;
    let path = dir.join("classes.embx");

    let m = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0, 0.0], [0.0, 3.0, 4.0]])?;
    let manifest = Manifest::texts(Role::SourceClassnames, vec!["mug".into(), "bike".into()]);
    save_embeddings(&path, &m, &manifest)?;

    let (back, manifest) = load_embeddings(&path)?;
    println!(
        "{}: {} rows x {} dims, role {:?}",
        path.display(),
        back.rows(),
        back.dims(),
        manifest.role
    );
    println!("names {:?}, norms {:?}", manifest.names, back.row_norms());
    let normalized = tasc::l2_normalize(&back)?;
    println!("after normalization {:?}", normalized.row_norms());
    Ok(())
}
