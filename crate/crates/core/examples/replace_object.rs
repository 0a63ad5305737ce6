//! Replace one object of a real image; everything outside the grown mask
//! keeps its original pixels. `replace_object [out_dir]`

use semsynth::composition::{replace_in_real, BlendConfig, LatentMode};
use semsynth::datamodel::extract_instances;
use semsynth::io::save_rgb_png;

mod common;

fn main() {
    common::init();
    let dir = common::out_dir("replace_object");
    let corpus = common::corpus(&dir.join("corpus"), &common::large_object_grammar(), 8, 9);
    let model = common::quick_model(&corpus, common::class_role(1), 20, &dir.join("class_1"));
    let (scene, rec) = corpus
        .scenes
        .iter()
        .find_map(|s| extract_instances(&s.instances, &s.semantic).unwrap().into_iter().find(|r| r.class_id == 1).map(|r| (s, r)))
        .expect("a rectangle");
    let (out, mask) = replace_in_real(scene, &rec, &model, &BlendConfig::default(), LatentMode::Prior, 3).expect("replace");
    let untouched = (0..mask.as_slice().len())
        .filter(|&i| mask.as_slice()[i] == 0.0)
        .all(|i| out.as_slice()[i * 3..i * 3 + 3] == scene.image.as_slice()[i * 3..i * 3 + 3]);
    save_rgb_png(&scene.image, &dir.join("original.png")).unwrap();
    save_rgb_png(&out, &dir.join("replaced.png")).unwrap();
    println!("instance {} replaced; pixels outside the mask unchanged: {untouched}", rec.instance_id);
}
