#pragma once

#include <filesystem>
#include <vector>

#include "btok/pooling.hpp"

namespace btok {

// Embedding record file: 16-byte header (4-byte magic, u32 version, u32 d_model,
// u32 pooling tag), then one d_model row of little-endian f32 per record in input order.
struct EmbeddingFile {
  Index d_model = 0;
  PoolingKind produced_by = PoolingKind::btok_mean;
  std::vector<RowVector<float>> records;
};

inline constexpr std::uint32_t kEmbeddingFileVersion = 1;

void save_embeddings(const std::filesystem::path& path, const EmbeddingFile& file);
EmbeddingFile load_embeddings(const std::filesystem::path& path);

// One sequence per line, whitespace-separated token ids. Blank lines are empty
// sequences. Ids outside [0, vocab_size) throw ShapeError naming the line.
std::vector<TokenSequence> read_token_file(const std::filesystem::path& path, Index vocab_size);

}  // namespace btok
