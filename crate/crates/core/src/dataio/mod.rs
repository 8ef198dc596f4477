//! MOTChallenge files, frame decoding and synthetic data.

mod frames;
mod mot;
mod seqinfo;
mod synth;

pub use frames::{
    decode_ppm, decode_raw, encode_ppm, encode_raw, list_frames, load_frames, read_frame,
    resize_bilinear, write_ppm, RAW_MAGIC,
};
pub use mot::{group_frames, parse_mot, parse_mot_rows, write_results, MotRole, MotRow};
pub use seqinfo::SeqInfo;
pub use synth::{synth_generate, SynthConfig, SyntheticSequence};
