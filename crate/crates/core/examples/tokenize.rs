//! Round-trips a pose through the robot-token tokenizer and encodes an instruction.

use rosa::common::{ActionState, Gripper, Workspace};
use rosa::tokenizer::TokenizerSpec;

fn main() -> rosa::Result<()> {
    let tok = TokenizerSpec::for_workspace(&Workspace::default(), 256);
    let pose = ActionState::new(0.123, 0.31, 0.05, 0.7, Gripper::Closed);
    let bins = tok.encode_action(&pose)?;
    let back = tok.decode_action(&bins)?;
    println!("pose    {:?}", pose.to_array());
    println!("bins    {bins:?}");
    println!("decoded {:?}", back.to_array());
    for d in 0..3 {
        println!("dim {d}: step {:.5} m", tok.step(d));
    }
    let ids = tok.encode_text("Put the banana in the plate")?;
    println!("instruction ids {ids:?} (vocabulary of {})", tok.vocab_size());
    Ok(())
}
