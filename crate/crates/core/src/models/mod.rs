pub mod convnet;
pub mod encoder;
pub mod nets;
pub mod pretrain;

pub use encoder::{encoder_embed, train_encoder, EncoderConfig, EncoderNet};
pub use nets::{
    images_to_tensor, tensor_to_images, DiscriminatorConfig, DiscriminatorNet, GeneratorConfig, GeneratorNet, Owner,
    PixelRange,
};
pub use pretrain::{pretrain_gan, reconstruction_l1, PretrainHistory, PretrainRow};
